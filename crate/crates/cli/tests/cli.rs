//! End-to-end runs of the `icemamba` binary on small synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icemamba::data::preprocess::clean_sic;
use icemamba::data::GridSeries;
use icemamba::forecast::{write_forecasts, ForecastSet};
use icemamba::Month;
use ndarray::Axis;

fn icemamba(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icemamba"));
    cmd.args(args).env_remove("ICEMAMBA_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
}

/// The single diagnostic line of a failed run.
fn diagnostic(o: &Output, code: i32) -> String {
    assert_eq!(o.status.code(), Some(code), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("icemamba: error")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("icemamba: error code={code} kind=")), "{}", lines[0]);
    lines[0].to_string()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Synthetic data of `years` years on a 16×16 grid.
fn synth(root: &Path, years: usize) -> PathBuf {
    let data = root.join("data");
    let cfg = write(&root.join("synth.ini"), &format!("[synth]\nheight = 16\nwidth = 16\nyears = {years}\n"));
    ok(&icemamba(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", data.to_str().unwrap()], &[]));
    data
}

const TINY: &str = "[model]\nembed_channels = 4\nstate_size = 2\ndepths = 1,1\npatch_size = 2\n\n[train]\nmax_epochs = 2\n";

fn config(root: &Path, name: &str, body: &str) -> String {
    write(&root.join(name), &format!("[data]\ndir = data\n\n{body}")).to_str().unwrap().to_string()
}

#[test]
fn unknown_keys_and_sections_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("a.ini"), "[train]\nlearnin_rate = 0.1\n");
    let line = diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1);
    assert!(line.contains("kind=usage") && line.contains("train.learnin_rate"), "{line}");

    let cfg = write(&dir.path().join("b.ini"), "[trian]\nmax_epochs = 1\n");
    assert!(diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1).contains("[trian]"));

    let cfg = write(&dir.path().join("c.ini"), "stray = 1\n");
    assert!(diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1).contains("stray"));

    let cfg = write(&dir.path().join("d.ini"), "[train]\nmax_epochs = many\n");
    assert!(diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1).contains("train.max_epochs"));

    let cfg = write(&dir.path().join("e.ini"), "[data]\nvariables = syn_causal:2\n");
    assert!(diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1).contains("data.variables"));
}

#[test]
fn bad_flags_and_paths_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    diagnostic(&icemamba(&["train", "--bogus"], &[]), 1);
    diagnostic(&icemamba(&["forecast", "--mode", "sideways"], &[]), 1);
    diagnostic(&icemamba(&["frobnicate"], &[]), 1);
    diagnostic(&icemamba(&["synth", "--detrend", "syn_trend"], &[]), 1);

    let cfg = write(&dir.path().join("a.ini"), "[data]\ndir = nowhere\n");
    let line = diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap()], &[]), 1);
    assert!(line.contains("data.dir") && line.contains("nowhere"), "{line}");
    let line = diagnostic(&icemamba(&["train"], &[]), 1);
    assert!(line.contains("data.dir"), "{line}");

    let out = dir.path().join("o");
    let line = diagnostic(&icemamba(&["synth", "--out", out.to_str().unwrap()], &[("ICEMAMBA_THREADS", "0")]), 1);
    assert!(line.contains("ICEMAMBA_THREADS"), "{line}");

    let cfg = write(&dir.path().join("s.ini"), "[synth]\nyears = 14\n");
    assert!(diagnostic(&icemamba(&["synth", "--config", cfg.to_str().unwrap()], &[]), 1).contains("synth"));

    let help = icemamba(&["--help"], &[]);
    ok(&help);
    assert!(stdout(&help).contains("benchmark"));
}

#[test]
fn evaluate_on_observations_gives_zero_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 15);
    let obs = clean_sic(&GridSeries::load(data.join("siconc.imgr")).unwrap(), None).unwrap();
    let sets: Vec<ForecastSet> = (0..12)
        .map(|i| {
            let init = Month::new(1983, 1).offset(i);
            let t = obs.index_of(init).unwrap();
            ForecastSet { init, maps: obs.data.slice_axis(Axis(0), (t..t + 3).into()).to_owned() }
        })
        .collect();
    let fdir = dir.path().join("perfect");
    write_forecasts(&fdir, "perfect", &sets, &obs.land_mask).unwrap();
    let cfg = config(dir.path(), "e.ini", "[splits]\ntrain = 1979-1981\nvalid = 1982-1982\ntest = 1983-1984\n\n[metrics]\nforecasts = perfect\n");
    let out = dir.path().join("eval");
    let o = icemamba(&["evaluate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    ok(&o);

    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let v: f64 = f[5].parse().unwrap();
        match f[0] {
            "acc" => assert!((v - 1.0).abs() < 1e-9, "{line}"),
            _ => assert_eq!(v, 0.0, "{line}"),
        }
        rows += 1;
    }
    assert_eq!(rows, 12 * 3 * 6);
    let heat = std::fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert!(heat.starts_with("metric,units,target_month,lead_1,lead_2,lead_3\n"));
    assert!(stdout(&o).contains("evaluate: mean mae = 0.000000 percent"));

    let manifest = std::fs::read_to_string(out.join("evaluate_manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"evaluate\"") && manifest.contains("metrics.csv"));
    assert!(manifest.contains("siconc.imgr") && manifest.contains("config_sha256"));
}

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 15);
    assert!(data.join("syn_causal.imgr").exists());
    let body = format!(
        "[data]\ndir = data\nvariables = syn_causal:1\n\n[splits]\ntrain = 1979-1987\nvalid = 1988-1990\ntest = 1991-1992\n\n{TINY}\n[explain]\nseeds = 2\n"
    );
    let cfg = write(&dir.path().join("run.ini"), &body);
    let cfg = cfg.to_str().unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = out.to_str().unwrap();
        for cmd in ["train", "forecast", "baseline"] {
            ok(&icemamba(&[cmd, "--config", cfg, "--leads", "2", "--seed", "4", "--out", o], &[]));
        }
        ok(&icemamba(&["evaluate", "--config", cfg, "--out", o], &[]));
        ok(&icemamba(&["explain", "--config", cfg, "--seed", "4", "--out", o], &[]));
        out
    };
    let a = run("a");
    for f in ["model.imck", "model.imck.cfg", "history.csv", "stats.json", "forecasts/index.csv", "metrics.csv", "importance.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    for b in ["anomaly_persistence", "damped_persistence", "trend_climatology"] {
        assert!(a.join("baselines").join(b).join("index.csv").exists(), "{b}");
    }
    let index = std::fs::read_to_string(a.join("forecasts/index.csv")).unwrap();
    // Targets span 1991-01..1992-12 with two leads: 23 inits.
    assert_eq!(index.lines().count(), 1 + 23 * 2);
    assert!(index.contains("1991-01,1,1991-01,icemamba_1991-01.imgr"));
    let imp = std::fs::read_to_string(a.join("importance.csv")).unwrap();
    assert!(imp.lines().any(|l| l.starts_with("syn_causal,1,all,all,")));

    // The seed flag overrides the file and is recorded.
    let m = std::fs::read_to_string(a.join("train_manifest.json")).unwrap();
    assert!(m.contains("\"seeds\": [\n    4\n  ]"), "{m}");

    let b = run("b");
    for f in ["model.imck", "history.csv", "forecasts/icemamba_1991-05.imgr", "metrics.csv", "heatmap.csv", "seasonal.csv", "importance.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs between reruns");
    }
}

#[test]
fn autoregressive_mode_extends_a_one_lead_model() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 15);
    let cfg = config(dir.path(), "ar.ini", &format!("[splits]\ntrain = 1979-1983\nvalid = 1984-1985\ntest = 1986-1986\n\n{TINY}"));
    let out = dir.path().join("ar");
    let o = out.to_str().unwrap();
    ok(&icemamba(&["train", "--config", &cfg, "--leads", "1", "--out", o], &[]));
    let f = icemamba(&["forecast", "--config", &cfg, "--mode", "autoregressive", "--leads", "3", "--out", o], &[]);
    ok(&f);
    assert!(stdout(&f).contains("3 leads each"));
    let index = std::fs::read_to_string(out.join("forecasts/index.csv")).unwrap();
    assert!(index.contains("1986-10,3,1986-12,"));

    // A multi-lead checkpoint cannot be rolled forward.
    ok(&icemamba(&["train", "--config", &cfg, "--leads", "2", "--out", o], &[]));
    diagnostic(&icemamba(&["forecast", "--config", &cfg, "--mode", "autoregressive", "--out", o], &[]), 1);
}

#[test]
fn benchmark_uses_rolling_splits() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 23);
    // The small synthetic grid varies less than observed SIC.
    let body = format!("{}\n[metrics]\nvariability_threshold = 0.02\n", TINY.replace("max_epochs = 2", "max_epochs = 1"));
    let cfg = config(dir.path(), "b.ini", &body);
    let out = dir.path().join("bench");
    let o = out.to_str().unwrap();
    let r = icemamba(&["benchmark", "--config", &cfg, "--target-year", "2001", "--leads", "4", "--out", o], &[]);
    ok(&r);
    assert!(
        stdout(&r).contains("benchmark 2001: train 1979-01..1996-12, valid 1997-01..2000-12, test 2001-01..2001-12"),
        "{}",
        stdout(&r)
    );
    let csv = std::fs::read_to_string(out.join("benchmark.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 4, "four inits times the model and three references");
    assert!(rows.iter().any(|r| r.starts_with("2001,icemamba,2001-06,4,")));
    assert!(rows.iter().any(|r| r.starts_with("2001,damped_persistence,2001-09,1,")));
    assert!(out.join("models/2001.imck").exists());

    let short = icemamba(&["benchmark", "--config", &cfg, "--target-year", "2001", "--leads", "3", "--out", o], &[]);
    assert!(diagnostic(&short, 1).contains("at least 4 leads"));
}

#[test]
fn data_and_numeric_failures_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 15);
    let splits = "[splits]\ntrain = 1979-1983\nvalid = 1984-1985\ntest = 1986-1986\n";

    // A configured variable without a file is a data error.
    std::fs::remove_file(data.join("syn_noise.imgr")).unwrap();
    let cfg = write(&dir.path().join("missing.ini"), &format!("[data]\ndir = data\nvariables = syn_noise:1\n\n{splits}\n{TINY}"));
    let line = diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap(), "--leads", "1"], &[]), 2);
    assert!(line.contains("kind=data") && line.contains("syn_noise.imgr"), "{line}");

    // A NaN in an unnormalized input makes the loss non-finite.
    let path = data.join("syn_trend.imgr");
    let mut trend = GridSeries::load(&path).unwrap();
    trend.data[[20, 5, 5]] = f32::NAN;
    trend.save(&path).unwrap();
    let cfg = write(&dir.path().join("nan.ini"), &format!("[data]\ndir = data\nvariables = syn_trend:1\n\n{splits}\n{TINY}"));
    let out = dir.path().join("nan");
    let line = diagnostic(&icemamba(&["train", "--config", cfg.to_str().unwrap(), "--leads", "1", "--out", out.to_str().unwrap()], &[]), 3);
    assert!(line.contains("kind=numeric") && line.contains("epoch 1"), "{line}");

    // A forecast without a checkpoint names the missing path.
    let cfg = config(dir.path(), "f.ini", splits);
    let line = diagnostic(&icemamba(&["forecast", "--config", &cfg, "--out", dir.path().join("none").to_str().unwrap()], &[]), 1);
    assert!(line.contains("forecast.checkpoint"), "{line}");
}
