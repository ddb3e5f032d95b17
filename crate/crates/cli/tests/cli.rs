use std::path::Path;
use std::process::{Command, Output};

use gatecluster_core::pipeline::{
    ASSIGNMENTS_FILE, CUBE_DIR, CUBE_RAW_DIR, DISTANCES_FILE, EIGENGAP_FILE, HISTORY_FILE, MASKS_FILE, MODEL_FILE,
    SCALING_FILE, SIMILARITY_FILE,
};

fn gatecluster(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatecluster"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A quick course: 60 students, full feature set, a few epochs.
fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "[paths]\nevents = \"in/events.csv\"\nschedule = \"in/schedule.toml\"\nlabels = \"in/labels.csv\"\n\
             [simulate]\nn_students = 60\nn_weeks = 4\nseed = 2\n\
             [train]\nseed = 2\nepochs = 3\nlambda_end = 0.0\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn n_min_two_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "[cluster]\nn_min = 2\n");
    let out = gatecluster(&config, &["cluster"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error: stage=config cause="), "{err}");
    assert!(err.contains("greater than two"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_config_file_exits_with_code_two() {
    let out = gatecluster(Path::new("/nonexistent/run.toml"), &["pipeline"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    assert!(gatecluster(&config, &["simulate"]).status.success());
    let out_dir = dir.path().join("elsewhere");
    let out = gatecluster(&config, &["pipeline", "--output", out_dir.to_str().unwrap(), "--threads", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in [
        CUBE_DIR,
        CUBE_RAW_DIR,
        SCALING_FILE,
        MODEL_FILE,
        HISTORY_FILE,
        MASKS_FILE,
        DISTANCES_FILE,
        SIMILARITY_FILE,
        ASSIGNMENTS_FILE,
        EIGENGAP_FILE,
        "report.json",
        "report_importance.csv",
        "report_values.csv",
    ] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let masks = std::fs::read_to_string(out_dir.join(MASKS_FILE)).unwrap();
    assert!(masks.starts_with("# stage=train hash="), "{}", &masks[..60]);
    assert!(masks.lines().next().unwrap().ends_with("train_seed=2 cluster_seed=0"));
}

#[test]
fn changed_config_makes_downstream_artifacts_stale() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    assert!(gatecluster(&config, &["simulate"]).status.success());
    assert!(gatecluster(&config, &["extract"]).status.success());
    assert!(gatecluster(&config, &["train"]).status.success());

    // a new train seed invalidates masks.csv for the cluster stage
    let out = gatecluster(&config, &["cluster", "--train-seed", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error: stage=cluster cause=stale artifact"), "{err}");
    assert_eq!(err.lines().count(), 1);

    // and a different extraction invalidates the cube for training
    let out = gatecluster(&config, &["train", "--set", "extract.weeks_used=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stale artifact"));

    // the cluster seed does not affect training, so masks stay valid
    let out = gatecluster(&config, &["cluster", "--cluster-seed", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn missing_inputs_fail_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out = gatecluster(&config, &["extract"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: stage=extract cause="));
}
