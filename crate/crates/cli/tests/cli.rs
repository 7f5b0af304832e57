use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use siw_cli::{default_sweep_values, RunManifest, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use siw_core::config::RunConfig;
use siw_core::dataset::ParameterGrid;
use siw_core::eval::{write_spectrum_csv, Parameter};
use siw_core::neural::TrainConfig;
use siw_core::pipeline::HiddenWidths;
use siw_core::wave::{self, CascadeOptions, FrequencyGrid, Geometry, SubstrateSpec};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig {
        parameter_grid: ParameterGrid {
            d_values: vec![4.0, 5.5, 7.0],
            r_values: vec![0.2, 0.4, 0.6, 0.8],
            g_values: vec![26.0, 31.0, 36.0],
        },
        frequency_grid: FrequencyGrid::new(9.0, 20.0, 41).unwrap(),
        ..RunConfig::default()
    };
    c.pipeline.hidden = HiddenWidths {
        fim: vec![24, 12],
        ffm: vec![12, 24],
        corrector: vec![8, 8],
    };
    let short = |t: &TrainConfig| TrainConfig {
        batch_size: 16,
        max_epochs: 4,
        ..*t
    };
    c.pipeline.fim = short(&c.pipeline.fim);
    c.pipeline.ffm = short(&c.pipeline.ffm);
    c.pipeline.rrm = short(&c.pipeline.rrm);
    c.pipeline.corrector = short(&c.pipeline.corrector);
    c.verify.n_targets = 5;
    c
}

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(config: &RunConfig) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("tiny.json");
        fs::write(&path, config.to_json()).unwrap();
        Self {
            out: tmp.path().join("run"),
            config: path,
            _tmp: tmp,
        }
    }

    fn siw(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_siw"));
        cmd.args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .env("RUST_LOG", "warn");
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.siw(args);
        assert_eq!(
            o.status.code(),
            Some(EXIT_OK),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siw")).args(args).output().unwrap()
}

fn write_spectrum(path: &Path, g: &Geometry, grid: &FrequencyGrid) {
    let s = wave::simulate(&SubstrateSpec::default(), g, grid).unwrap();
    fs::write(path, write_spectrum_csv(&s)).unwrap();
}

#[test]
fn generate_train_evaluate_writes_reports_and_manifest() {
    let run = Run::new(&tiny_config());
    run.ok(&["generate"]);
    assert!(run.path("dataset/manifest.json").is_file());
    run.ok(&["train", "--model", "all"]);
    assert!(run.path("bundle/bundle.json").is_file());
    let stdout = run.ok(&["evaluate"]);
    assert!(stdout.contains("IRC test mse"));

    for f in [
        "metrics.csv",
        "trace.csv",
        "histogram_mse.csv",
        "histogram_mae.csv",
        "comparison_table.csv",
        "predictions.csv",
        "verify.csv",
    ] {
        assert!(run.path(&format!("reports/{f}")).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(run.path("reports/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6);
    let verify = fs::read_to_string(run.path("reports/verify.csv")).unwrap();
    assert_eq!(verify.lines().count(), 1 + 5 * 3);

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(run.path("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "evaluate");
    assert_eq!(manifest.seeds.fim, 42);
    assert_eq!(manifest.seeds.ffm, 142);
    assert_eq!(manifest.seeds.rrm, 242);
    assert_eq!(manifest.seeds.correctors, vec![43, 44, 45, 46, 47]);
    assert!(!manifest.git_describe.is_empty());
    let commands: Vec<&str> = manifest.history.iter().map(|h| h.command.as_str()).collect();
    assert_eq!(commands, ["generate", "train", "evaluate"]);

    // The echoed config is itself a valid config for a rerun.
    let echoed = RunConfig::load(&run.path("config.json")).unwrap();
    assert_eq!(echoed.pipeline, tiny_config().pipeline);
}

#[test]
fn identical_runs_give_identical_reports() {
    let config = tiny_config();
    let read = |run: &Run| {
        run.ok(&["generate"]);
        run.ok(&["train", "--model", "all"]);
        run.ok(&["evaluate"]);
        (
            fs::read(run.path("reports/metrics.csv")).unwrap(),
            fs::read(run.path("reports/trace.csv")).unwrap(),
            fs::read(run.path("bundle/fim.ckpt")).unwrap(),
        )
    };
    assert_eq!(read(&Run::new(&config)), read(&Run::new(&config)));
}

#[test]
fn stages_trained_separately_match_train_all() {
    let config = tiny_config();
    let a = Run::new(&config);
    a.ok(&["generate"]);
    a.ok(&["train", "--model", "all"]);
    a.ok(&["evaluate"]);
    let b = Run::new(&config);
    b.ok(&["generate"]);
    for m in ["fim", "hifr2", "irc"] {
        b.ok(&["train", "--model", m]);
    }
    b.ok(&["evaluate"]);
    assert_eq!(
        fs::read(a.path("reports/metrics.csv")).unwrap(),
        fs::read(b.path("reports/metrics.csv")).unwrap()
    );
}

#[test]
fn missing_artifacts_exit_with_data_error() {
    let run = Run::new(&tiny_config());
    assert_eq!(run.siw(&["train", "--model", "fim"]).status.code(), Some(EXIT_DATA));
    run.ok(&["generate"]);
    let o = run.siw(&["train", "--model", "irc"]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FIM"));
    assert_eq!(run.siw(&["evaluate"]).status.code(), Some(EXIT_DATA));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bare(&["generate", "--bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bare(&[]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bare(&["train", "--model", "svm"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bare(&["sweep", "--param", "R4"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bare(&["--help"]).status.code(), Some(EXIT_OK));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"sead": 3}"#).unwrap();
    let o = bare(&["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn seed_flag_overrides_config_file() {
    let mut config = tiny_config();
    config.pipeline.seed = 5;
    let run = Run::new(&config);
    run.ok(&["sweep", "--param", "D1", "--seed", "9"]);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(run.path("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config.pipeline.seed, 9);
    assert_eq!(manifest.seeds.fim, 9);
    assert_eq!(manifest.seeds.split, config.split.seed);
}

#[test]
fn predict_emits_physical_parameters_and_trace() {
    let config = tiny_config();
    let run = Run::new(&config);
    run.ok(&["generate"]);
    run.ok(&["train", "--model", "all"]);
    let input = run.out.join("reference.csv");
    write_spectrum(&input, &Geometry::reference(), &config.frequency_grid);

    for (model, points) in [("fim", 1), ("hifr2", 2), ("irc", 6)] {
        let stdout = run.ok(&["predict", "--model", model, "--input", input.to_str().unwrap()]);
        let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        let params = v["parameters"].as_object().unwrap();
        assert_eq!(params.len(), 6);
        for name in ["D1", "D2", "R1", "R2", "R3", "G"] {
            assert!(params[name].as_f64().unwrap().is_finite());
        }
        let trace = v["trace"].as_array().unwrap();
        assert_eq!(trace.len(), points);
        assert_eq!(trace.last().unwrap()["D1"], params["D1"]);
        assert!(run.path(&format!("predictions/reference_{model}.json")).is_file());
    }

    let stdout = run.ok(&[
        "predict",
        "--model",
        "irc",
        "--clamp",
        "--input",
        input.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let g = v["parameters"]["G"].as_f64().unwrap();
    assert!((26.0..=36.0).contains(&g));

    let off_grid = run.out.join("off_grid.csv");
    write_spectrum(
        &off_grid,
        &Geometry::reference(),
        &FrequencyGrid::new(9.0, 20.0, 21).unwrap(),
    );
    let o = run.siw(&["predict", "--model", "fim", "--input", off_grid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    let o = run.siw(&["predict", "--model", "all", "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn sweep_d1_and_d2_decrease() {
    let run = Run::new(&RunConfig::default());
    for p in ["D1", "D2"] {
        let stdout = run.ok(&["sweep", "--param", p]);
        assert!(stdout.contains("verdict: strictly_decreasing"), "{p}: {stdout}");
        let csv = fs::read_to_string(run.path(&format!("sweep_{p}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
    let stdout = run.ok(&["sweep", "--param", "d1", "--values", "4.5,6.5"]);
    assert!(stdout.contains("verdict: strictly_decreasing"));
}

#[test]
fn default_sweeps_are_valid_geometries() {
    for p in Parameter::ALL {
        for v in default_sweep_values(p) {
            let g = p.set(&Geometry::reference(), v);
            let relaxed = CascadeOptions {
                relax_g_constraint: true,
                ..CascadeOptions::default()
            };
            wave::simulate_with(&SubstrateSpec::default(), &g, &FrequencyGrid::default(), &relaxed).unwrap();
        }
    }
}

#[test]
fn verify_scores_a_target_directory() {
    let config = tiny_config();
    let run = Run::new(&config);
    run.ok(&["generate"]);
    run.ok(&["train", "--model", "fim"]);
    let targets = run.out.join("targets");
    fs::create_dir_all(&targets).unwrap();
    write_spectrum(&targets.join("a.csv"), &Geometry::reference(), &config.frequency_grid);
    let other = Geometry {
        d1: 7.0,
        g: 31.0,
        ..Geometry::reference()
    };
    write_spectrum(&targets.join("b.csv"), &other, &config.frequency_grid);
    let stdout = run.ok(&["verify", "--targets", targets.to_str().unwrap(), "--threads", "2"]);
    assert!(stdout.contains("FIM spectrum mse"));
    let csv = fs::read_to_string(run.path("verify/verify.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let names = fs::read_to_string(run.path("verify/targets.csv")).unwrap();
    assert_eq!(names, "file\na.csv\nb.csv\n");

    let empty = run.out.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = run.siw(&["verify", "--targets", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
}

#[test]
fn shipped_desk_config_matches_library_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let c = RunConfig::load(&path).unwrap();
    assert_eq!(
        RunConfig {
            out_dir: RunConfig::desk().out_dir,
            ..c
        },
        RunConfig::desk()
    );
}
