use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rovae(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rovae"));
    cmd.args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ROVAE_OUT");
    if let Some(dir) = env_out {
        cmd.env("ROVAE_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml")
}

fn results_path(out: &Path) -> PathBuf {
    let run = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("run directory");
    run.join("results.csv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_is_idempotent_and_feeds_plotdata_and_diagnose() {
    let out = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let cfg = cfg.to_str().unwrap();
    let out_s = out.path().to_str().unwrap();

    let first = rovae(&["run", cfg, "--out", out_s], None);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let results = results_path(out.path());
    let bytes = std::fs::read(&results).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    // 2 levels x 2 seeds x 3 variants; the pair-free baseline trains once per seed.
    assert_eq!(text.lines().count(), 1 + 12);
    assert!(text.lines().skip(1).all(|l| l.contains(",ok,")));

    let again = rovae(&["run", cfg, "--out", out_s], None);
    assert!(again.status.success());
    assert!(
        stdout(&again).contains("0 trained, 10 skipped"),
        "{}",
        stdout(&again)
    );
    assert_eq!(std::fs::read(&results).unwrap(), bytes);

    let forced = rovae(
        &["run", cfg, "--out", out_s, "--force", "--jobs", "2"],
        None,
    );
    assert!(forced.status.success());
    assert_eq!(std::fs::read(&results).unwrap(), bytes);

    let plots = out.path().join("plots");
    let p = rovae(
        &[
            "plotdata",
            results.to_str().unwrap(),
            plots.to_str().unwrap(),
        ],
        None,
    );
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    for name in [
        "linear_r2.csv",
        "linear_mig.csv",
        "linear_kappa.csv",
        "linear_p_s_below_1.csv",
    ] {
        assert!(plots.join(name).is_file(), "{name}");
    }
    let r2 = std::fs::read_to_string(plots.join("linear_r2.csv")).unwrap();
    assert!(r2.starts_with("noise_kind,noise_level,variant,median,q25,q75,n_seeds\n"));
    assert!(plots.join("trust_hist_flip_0.2.csv").is_file());

    let cells = results.parent().unwrap().join("cells");
    let rovae_cell = cells.join("rovae_flip_0.2_s0");
    let d = rovae(
        &[
            "diagnose",
            rovae_cell.join("model.ckpt").to_str().unwrap(),
            rovae_cell.join("pairs.csv").to_str().unwrap(),
        ],
        None,
    );
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    assert!(stdout(&d).contains("precision:"));

    let vovae_cell = cells.join("vovae_flip_0.2_s0");
    let v = rovae(
        &[
            "diagnose",
            vovae_cell.join("model.ckpt").to_str().unwrap(),
            vovae_cell.join("pairs.csv").to_str().unwrap(),
        ],
        None,
    );
    assert!(!v.status.success());
}

#[test]
fn dry_run_writes_nothing_and_env_sets_output_root() {
    let out = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let dry = rovae(
        &["run", cfg.to_str().unwrap(), "--dry-run"],
        Some(out.path()),
    );
    assert!(dry.status.success());
    assert!(stdout(&dry).contains("todo"));
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 0);

    let one = rovae(
        &["run", cfg.to_str().unwrap(), "--seed", "3"],
        Some(out.path()),
    );
    assert!(
        one.status.success(),
        "{}",
        String::from_utf8_lossy(&one.stderr)
    );
    let text = std::fs::read_to_string(results_path(out.path())).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(4) == Some("3")));
}

#[test]
fn untrained_checkpoint_flags_nothing() {
    let out = tempfile::tempdir().unwrap();
    let cfg = std::fs::read_to_string(example_config())
        .unwrap()
        .replace("steps = 150", "steps = 0")
        .replace("levels = [0.0, 0.2]", "levels = [0.2]")
        .replace(
            "variants = [\"rovae\", \"vovae\", \"beta_vae\"]",
            "variants = [\"rovae\"]",
        )
        .replace("seeds = [0, 1]", "seeds = [0]");
    let path = out.path().join("untrained.toml");
    std::fs::write(&path, cfg).unwrap();
    let run = rovae(
        &[
            "run",
            path.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ],
        None,
    );
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let cell = results_path(out.path())
        .parent()
        .unwrap()
        .join("cells/rovae_flip_0.2_s0");
    let d = rovae(
        &[
            "diagnose",
            cell.join("model.ckpt").to_str().unwrap(),
            cell.join("pairs.csv").to_str().unwrap(),
        ],
        None,
    );
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    let text = stdout(&d);
    assert!(text.contains("flagged (mean s < 1): 0"), "{text}");
    assert!(text.contains("fraction_below_1: 0.0000"), "{text}");
}

#[test]
fn bad_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "[dataset]\nkind = \"linear\"\nn = 100\n[pairs]\nbudget = 0\n",
    )
    .unwrap();
    let o = rovae(&["run", path.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    let missing = rovae(
        &["run", dir.path().join("absent.toml").to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(missing.status.code(), Some(2));
    let unknown = dir.path().join("unknown.toml");
    let text = std::fs::read_to_string(example_config())
        .unwrap()
        .replace("[train]", "[train]\nlearning_rate = 1.0");
    std::fs::write(&unknown, text).unwrap();
    let o = rovae(&["run", unknown.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}
