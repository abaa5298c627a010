//! Config-driven grid runs: noise levels × variants × seeds, one isolated
//! directory per trained model and a results table in plan order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{save_pairs, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::experiment::{run_cell, CellSpec, DatasetSpec, Prepared};
use crate::model::VariantKind;
use crate::train::{save_checkpoint, TrainConfig};

/// Environment variable that overrides the configured output root.
pub const OUT_ENV: &str = "ROVAE_OUT";

pub const RESULTS_HEADER: &str = "dataset,variant,noise_kind,noise_level,seed,status,mig,r2,kappa,p_s_below_1,flip_detection_precision,flip_detection_recall";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub variants: Vec<VariantKind>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trust_samples")]
    pub trust_samples_per_pair: usize,
    #[serde(default)]
    pub kappa: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
            trust_samples_per_pair: default_trust_samples(),
            kappa: false,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_trust_samples() -> usize {
    10
}

/// Parsed experiment file. `train` holds overrides of [`TrainConfig`]; the
/// variant and seed come from the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub pairs: PairsSection,
    pub noise: NoiseSection,
    pub grid: GridSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(train) = raw.get("train").and_then(|t| t.as_table()) {
            for key in ["variant", "seed"] {
                if train.contains_key(key) {
                    return Err(Error::config(format!(
                        "train.{key} is set by the grid section, not the train section"
                    )));
                }
            }
        }
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n < 2 {
            return Err(Error::config("dataset.n must be at least 2"));
        }
        if self.pairs.budget == 0 {
            return Err(Error::config("pairs.budget must be at least 1"));
        }
        if self.noise.levels.is_empty() {
            return Err(Error::config("noise.levels must not be empty"));
        }
        for &level in &self.noise.levels {
            self.noise_spec(level)
                .validate()
                .map_err(|e| Error::config(format!("noise.levels: {e}")))?;
        }
        if self.noise.kind == NoiseKind::None && self.noise.levels.iter().any(|&l| l != 0.0) {
            return Err(Error::config("noise.kind = \"none\" only admits level 0"));
        }
        let distinct_levels: BTreeSet<u64> =
            self.noise.levels.iter().map(|l| l.to_bits()).collect();
        if distinct_levels.len() != self.noise.levels.len() {
            return Err(Error::config("noise.levels must be distinct"));
        }
        if self.grid.variants.is_empty() {
            return Err(Error::config("grid.variants must not be empty"));
        }
        let distinct: BTreeSet<&str> = self.grid.variants.iter().map(|v| v.as_str()).collect();
        if distinct.len() != self.grid.variants.len() {
            return Err(Error::config("grid.variants must be distinct"));
        }
        if self.grid.seeds.is_empty() {
            return Err(Error::config("grid.seeds must not be empty"));
        }
        let seeds: BTreeSet<u64> = self.grid.seeds.iter().copied().collect();
        if seeds.len() != self.grid.seeds.len() {
            return Err(Error::config("grid.seeds must be distinct"));
        }
        for &variant in &self.grid.variants {
            self.train_config(variant, 0)
                .validate()
                .map_err(|e| Error::config(format!("train ({variant}): {e}")))?;
        }
        if self.output.trust_samples_per_pair == 0 {
            return Err(Error::config(
                "output.trust_samples_per_pair must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn noise_spec(&self, level: f64) -> NoiseSpec {
        match self.noise.kind {
            NoiseKind::None => NoiseSpec::none(),
            NoiseKind::Flip => NoiseSpec::flip(level),
            NoiseKind::Gaussian => NoiseSpec::gaussian(level),
        }
    }

    pub fn train_config(&self, variant: VariantKind, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        }
    }

    /// Hash of everything that affects results (the output location excluded).
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Output root: `--out` override, then the environment, then the file.
    pub fn out_root(&self, override_dir: Option<&Path>) -> PathBuf {
        if let Some(dir) = override_dir {
            return dir.to_path_buf();
        }
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }

    pub fn run_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        self.out_root(override_dir)
            .join(format!("{}-{}", self.dataset.kind, self.content_hash()))
    }

    /// Training jobs in plan order. The unsupervised baseline ignores labels,
    /// so it is trained once per seed and reported at every noise level.
    pub fn plan(&self) -> Vec<PlannedCell> {
        let mut cells = Vec::new();
        for &variant in &self.grid.variants {
            for &seed in &self.grid.seeds {
                if variant.uses_pairs() {
                    for &level in &self.noise.levels {
                        cells.push(PlannedCell {
                            variant,
                            seed,
                            level: Some(level),
                        });
                    }
                } else {
                    cells.push(PlannedCell {
                        variant,
                        seed,
                        level: None,
                    });
                }
            }
        }
        cells
    }

    /// Result rows in table order: noise level, then variant, then seed.
    fn rows(&self) -> Vec<(PlannedCell, f64)> {
        let mut rows = Vec::new();
        for &level in &self.noise.levels {
            for &variant in &self.grid.variants {
                for &seed in &self.grid.seeds {
                    let cell = PlannedCell {
                        variant,
                        seed,
                        level: variant.uses_pairs().then_some(level),
                    };
                    rows.push((cell, level));
                }
            }
        }
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedCell {
    pub variant: VariantKind,
    pub seed: u64,
    /// `None` for cells that do not depend on the noise level.
    pub level: Option<f64>,
}

impl PlannedCell {
    pub fn dir_name(&self, noise: NoiseKind) -> String {
        match self.level {
            Some(level) => format!("{}_{noise}_{level}_s{}", self.variant, self.seed),
            None => format!("{}_s{}", self.variant, self.seed),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub force: bool,
    pub dry_run: bool,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Metric fields of one completed cell, serialized in results-table order.
#[derive(Clone, Debug, PartialEq)]
struct CellMetrics {
    mig: f64,
    r2: f64,
    kappa: Option<f64>,
    p_s_below_1: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CellMetrics {
    fn to_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mig,
            self.r2,
            opt(self.kappa),
            opt(self.p_s_below_1),
            opt(self.precision),
            opt(self.recall)
        )
    }
}

const DONE_FILE: &str = "metrics.csv";
const FAILED_FILE: &str = "failed.txt";

/// Executes (or, with `dry_run`, only prints) the grid and rewrites the
/// results table.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let run_dir = config.run_dir(opts.out.as_deref());
    let cells_dir = run_dir.join("cells");
    let plan = config.plan();
    let is_done = |c: &PlannedCell| {
        cells_dir
            .join(c.dir_name(config.noise.kind))
            .join(DONE_FILE)
            .is_file()
    };

    if opts.dry_run {
        println!("run directory: {}", run_dir.display());
        for c in &plan {
            let state = if !opts.force && is_done(c) {
                "done"
            } else {
                "todo"
            };
            println!("{state}  {}", c.dir_name(config.noise.kind));
        }
        return Ok(RunSummary {
            run_dir,
            completed: 0,
            skipped: plan.iter().filter(|c| !opts.force && is_done(c)).count(),
            failed: 0,
        });
    }

    std::fs::create_dir_all(&cells_dir)?;
    let canonical = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(run_dir.join("config.toml"), canonical)?;

    let todo: Vec<PlannedCell> = plan
        .iter()
        .copied()
        .filter(|c| opts.force || !is_done(c))
        .collect();
    let skipped = plan.len() - todo.len();
    let mut failed = 0;
    if !todo.is_empty() {
        let prep = Prepared::new(&config.dataset)?;
        let data_path = run_dir.join("dataset.txt");
        if !data_path.is_file() {
            prep.dataset.save(&data_path)?;
        }
        let next = AtomicUsize::new(0);
        let failures = Mutex::new(0usize);
        let jobs = opts.jobs.max(1).min(todo.len());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = todo.get(k) else { break };
                    let dir = cells_dir.join(cell.dir_name(config.noise.kind));
                    log::info!("cell {}", dir.display());
                    if let Err(e) = execute_cell(config, &prep, cell, &dir) {
                        log::error!("cell {} failed: {e}", dir.display());
                        let _ = std::fs::write(dir.join(FAILED_FILE), format!("{e}\n"));
                        *failures.lock().expect("no panics while counting") += 1;
                    }
                });
            }
        });
        failed = failures.into_inner().expect("no panics while counting");
    }
    write_results(config, &run_dir)?;
    Ok(RunSummary {
        run_dir,
        completed: todo.len() - failed,
        skipped,
        failed,
    })
}

fn execute_cell(
    config: &ExperimentConfig,
    prep: &Prepared,
    cell: &PlannedCell,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for stale in [DONE_FILE, FAILED_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let spec = CellSpec {
        dataset: config.dataset.clone(),
        pair_budget: config.pairs.budget,
        noise: config.noise_spec(cell.level.unwrap_or(0.0)),
        train: config.train_config(cell.variant, cell.seed),
        trust_samples_per_pair: config.output.trust_samples_per_pair,
        kappa: config.output.kappa,
    };
    let out = run_cell(prep, &spec)?;
    out.log.write_csv(&dir.join("train_log.csv"))?;
    save_checkpoint(&out.params, &dir.join("model.ckpt"))?;
    if !out.pairs.is_empty() {
        save_pairs(&out.pairs, &dir.join("pairs.csv"))?;
    }
    if let Some(h) = &out.histogram {
        let mut text = String::from("bin_left,bin_right,count\n");
        for (l, r, c) in h.rows() {
            let _ = writeln!(text, "{l},{r},{c}");
        }
        std::fs::write(dir.join("trust_hist.csv"), text)?;
    }
    let metrics = CellMetrics {
        mig: out.report.mig,
        r2: out.report.r2,
        kappa: out.report.kappa,
        p_s_below_1: out.report.p_s_below_1,
        precision: out.flips.and_then(|f| f.precision),
        recall: out.flips.and_then(|f| f.recall),
    };
    // Written last: its presence marks the cell complete.
    let tmp = dir.join("metrics.tmp");
    std::fs::write(&tmp, format!("{}\n", metrics.to_fields()))?;
    std::fs::rename(tmp, dir.join(DONE_FILE))?;
    Ok(())
}

/// Rebuilds `results.csv` from the cell directories, in table order.
fn write_results(config: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for (cell, level) in config.rows() {
        let dir = run_dir.join("cells").join(cell.dir_name(config.noise.kind));
        let (status, fields) = match std::fs::read_to_string(dir.join(DONE_FILE)) {
            Ok(line) => ("ok", line.trim_end().to_string()),
            Err(_) => ("failed", ",,,,,".to_string()),
        };
        let _ = writeln!(
            text,
            "{},{},{},{},{},{status},{fields}",
            config.dataset.kind, cell.variant, config.noise.kind, level, cell.seed
        );
    }
    let tmp = run_dir.join("results.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, run_dir.join("results.csv"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[dataset]
kind = "linear"
n = 300
x_dim = 8

[pairs]
budget = 100

[noise]
kind = "flip"
levels = [0.0, 0.1, 0.2, 0.3, 0.4]

[grid]
variants = ["rovae", "vovae", "beta_vae"]
seeds = [0, 1, 2, 3, 4]

[train]
steps = 2
"#;

    #[test]
    fn plan_and_rows_follow_grid_arithmetic() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.rows().len(), 75);
        // ROVAE and VOVAE per level and seed; the baseline once per seed.
        assert_eq!(c.plan().len(), 2 * 5 * 5 + 5);
    }

    #[test]
    fn config_errors_name_the_field() {
        let cases = [
            (
                BASE.replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0, 0]"),
                "seeds",
            ),
            (
                BASE.replace("levels = [0.0, 0.1, 0.2, 0.3, 0.4]", "levels = []"),
                "levels",
            ),
            (
                BASE.replace("levels = [0.0, 0.1, 0.2, 0.3, 0.4]", "levels = [0.7]"),
                "levels",
            ),
            (
                BASE.replace("\"rovae\", ", "\"rovae\", \"rovae\", "),
                "variants",
            ),
            (BASE.replace("steps = 2", "steps = 2\nlr = -1.0"), "lr"),
            (
                BASE.replace("steps = 2", "steps = 2\nseed = 3"),
                "train.seed",
            ),
            (BASE.replace("steps = 2", "steps = 2\nwarmup = 3"), "warmup"),
            (BASE.replace("\"beta_vae\"", "\"gan\""), "gan"),
        ];
        for (text, needle) in cases {
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("/elsewhere");
        assert_eq!(a.content_hash(), b.content_hash());
        b.train.steps = 3;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
