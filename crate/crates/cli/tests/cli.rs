use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use implicitreg_cli::experiments::aggregate;
use implicitreg_cli::SEED_ENV;
use tempfile::TempDir;

fn run(config: &Path, out: &Path, extra: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_implicitreg"));
    cmd.arg("run").arg(config).arg("--out").arg(out).args(extra);
    cmd.env_remove(SEED_ENV);
    if let Some(s) = seed {
        cmd.env(SEED_ENV, s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn summary_value(out: &Path, key: &str) -> String {
    let text = fs::read_to_string(out.join("summary.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from summary:\n{text}"))
        .to_string()
}

const ORACLE: &str = "experiment = variance-oracle\n\
                      model.kind = logistic\n\
                      dataset.n = 12\n\
                      dataset.dim = 3\n\
                      dataset.test_n = 0\n\
                      verify.instances = 20\n";

#[test]
fn variance_oracle_reports_tiny_gap_and_echoes_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "oracle.cfg", ORACLE);
    let out = dir.path().join("out");
    let res = run(&cfg, &out, &["--set", "verify.batch_size=3"], Some("17"));
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let gap: f64 = summary_value(&out, "max_rel_gap").parse().unwrap();
    assert!(gap < 1e-12, "gap {gap}");
    assert_eq!(summary_value(&out, "passed"), "true");

    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.starts_with(ORACLE));
    assert!(echo.contains("# --set verify.batch_size=3\n"));
    assert!(echo.ends_with(&format!("# {SEED_ENV}=17\n")));

    let table = fs::read_to_string(out.join("variance_oracle.csv")).unwrap();
    let sizes: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(sizes, ["1", "2", "3", "4", "6", "12"]);
    assert!(out.join("identities.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "oracle.cfg", ORACLE);
    let out = dir.path().join("out");

    let res = run(&cfg, &out, &["--set", "train.epsilon=0"], None);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("train.epsilon"), "{err}");

    let res = run(&cfg, &out, &["--set", "train.epsilonn=0.1"], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("train.epsilonn"));

    let bad = write_config(&dir, "bad.cfg", "experiment = scaling\nmodel.depth = 3\n");
    let res = run(&bad, &out, &[], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));

    let res = run(&cfg, &out, &[], Some("not-a-seed"));
    assert_eq!(res.status.code(), Some(2));

    let res = run(&dir.path().join("absent.cfg"), &out, &[], None);
    assert_eq!(res.status.code(), Some(2));

    let missing = write_config(
        &dir,
        "csv.cfg",
        "experiment = train\nmodel.kind = logistic\ndataset.kind = csv\n\
         dataset.csv_path = /nonexistent/train.csv\n",
    );
    let res = run(&missing, &out, &[], None);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("dataset.csv_path"));
    assert!(!out.join("summary.txt").exists());
}

#[test]
fn trains_on_csv_data() {
    let dir = TempDir::new().unwrap();
    let mut rows = String::from("feature_0,feature_1,target\n");
    for i in 0..40 {
        let x = i as f64 / 10.0 - 2.0;
        let y = (i * 7 % 11) as f64 / 5.0 - 1.0;
        rows.push_str(&format!("{x},{y},{}\n", u8::from(x + 0.3 * y > 0.0)));
    }
    fs::write(dir.path().join("train.csv"), &rows).unwrap();
    fs::write(dir.path().join("test.csv"), &rows).unwrap();
    let cfg = write_config(
        &dir,
        "csv.cfg",
        &format!(
            "experiment = train\nmodel.kind = logistic\ndataset.kind = csv\n\
             dataset.csv_path = {0}/train.csv\ndataset.test_csv_path = {0}/test.csv\n\
             train.epsilon = 0.5\ntrain.batch_size = 8\ntrain.epochs = 30\n",
            dir.path().display()
        ),
    );
    let out = dir.path().join("out");
    let res = run(&cfg, &out, &[], None);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let acc: f64 = summary_value(&out, "best_test_accuracy").parse().unwrap();
    assert!(acc > 0.85, "accuracy {acc}");
    assert_eq!(summary_value(&out, "diverged"), "false");
    let header = fs::read_to_string(out.join("train.csv")).unwrap();
    assert!(
        header.lines().count() == 31,
        "one row per epoch plus header"
    );
}

#[test]
fn seed_variable_changes_training_and_reruns_match() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "train.cfg",
        "experiment = train\nmodel.kind = mlp\nmodel.hidden = 8\n\
         dataset.n = 64\ndataset.test_n = 64\ndataset.dim = 4\n\
         train.batch_size = 8\ntrain.epochs = 3\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(run(&cfg, &a, &[], Some("5")).status.code(), Some(0));
    assert_eq!(
        run(&cfg, &b, &["--jobs", "2"], Some("5")).status.code(),
        Some(0)
    );
    assert_eq!(run(&cfg, &c, &[], Some("6")).status.code(), Some(0));
    let csv = |d: &Path| fs::read(d.join("train.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(csv(&a), csv(&c));
}

#[test]
fn single_run_sweep_points_report_the_run_itself() {
    let row = aggregate(0.1, &[(0.75, 0.002)], 1);
    assert_eq!(row.mean_best_acc, 0.75);
    assert_eq!(row.std_best_acc, 0.0);
    assert_eq!(row.mean_final_creg, 0.002);

    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "sweep.cfg",
        "experiment = sweep\nmodel.kind = logistic\n\
         dataset.n = 64\ndataset.test_n = 64\ndataset.dim = 4\n\
         train.batch_size = 8\ntrain.epochs = 2\n\
         sweep.parameter = epsilon\nsweep.values = 0.05, 0.1\n\
         sweep.runs_per_point = 1\nsweep.keep_best = 1\n",
    );
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[], None).status.code(), Some(0));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert_eq!(runs.lines().count(), 3);
}
