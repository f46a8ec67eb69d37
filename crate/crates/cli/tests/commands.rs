use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqaudit_core::io::{
    artifact_to_string, load_artifact, load_schedule, OcExport, ReplayExport, RunManifest, SessionExport,
};
use seqaudit_core::{calibrate, oc_curve, replay, synth_population, Status};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqaudit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn calibrate_writes_schedule_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schedule.json");
    let o = bin(&[
        "calibrate",
        "--config",
        &config("n100.toml"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let csv = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 99);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let alpha: f64 = cols[5].parse().unwrap();
        let beta: f64 = cols[6].parse().unwrap();
        assert!(alpha <= 0.05 && beta <= 0.05, "{row}");
    }

    let schedule = load_schedule(&out).unwrap();
    assert_eq!(schedule.config.n, 100);
    assert_eq!(schedule.config.m_reps, 10_000);
    assert_eq!(schedule, calibrate(&schedule.config).unwrap());

    // The manifest's config regenerates a byte-identical schedule.
    let manifest: RunManifest = load_artifact(&dir.path().join("schedule.manifest.json")).unwrap();
    assert_eq!(manifest.artifacts["schedule"], out.display().to_string());
    let again = bin(&["calibrate", "--config", &config("n100.toml")]);
    assert_eq!(stdout(&again), std::fs::read_to_string(&out).unwrap());
    assert_eq!(
        artifact_to_string(&calibrate(&manifest.config).unwrap()).unwrap(),
        stdout(&again)
    );
}

#[test]
fn inline_flags_override_the_config_file() {
    let o = bin(&[
        "calibrate",
        "--config",
        &config("n100.toml"),
        "--n",
        "60",
        "--backend",
        "exact",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let inline = bin(&[
        "calibrate",
        "--n",
        "60",
        "--r",
        "0.2",
        "--theta-h",
        "0.05",
        "--theta-k",
        "0.05",
        "--alpha",
        "0.05",
        "--beta",
        "0.05",
        "--m-reps",
        "10000",
        "--seed",
        "20260101",
        "--backend",
        "exact",
    ]);
    assert_eq!(inline.status.code(), Some(0), "{}", stderr(&inline));
    assert_eq!(stdout(&o), stdout(&inline));
}

#[test]
fn validation_errors_exit_with_one_and_name_the_flag() {
    let cases: [(&[&str], &str); 7] = [
        (
            &[
                "calibrate",
                "--n",
                "100",
                "--r",
                "0.2",
                "--theta-h",
                "0.05",
                "--alpha",
                "0.6",
                "--beta",
                "0.05",
            ],
            "--alpha",
        ),
        (
            &[
                "calibrate",
                "--n",
                "100",
                "--r",
                "0.2",
                "--theta-h",
                "0.05",
                "--alpha",
                "0.05",
            ],
            "--beta",
        ),
        (
            &[
                "calibrate",
                "--n",
                "100",
                "--r",
                "0.2",
                "--theta-h",
                "0.05",
                "--alpha",
                "0.05",
                "--beta",
                "0.05",
                "--variant",
                "truncated",
            ],
            "--T",
        ),
        (&["calibrate", "--n", "ten"], "--n"),
        (&["calibrate", "--bogus"], "--bogus"),
        (&["oc", "--config", "/no/such/file.toml"], "--config"),
        (
            &[
                "oc",
                "--n",
                "100",
                "--r",
                "0.2",
                "--theta-h",
                "0.05",
                "--alpha",
                "0.05",
                "--beta",
                "0.05",
                "--m-reps",
                "200",
                "--grid",
                "9-3",
            ],
            "--grid",
        ),
    ];
    for (args, flag) in cases {
        let o = bin(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(flag), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn infeasible_truncated_design_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = bin(&[
        "calibrate",
        "--config",
        &config("truncated.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"));
    let schedule = load_schedule(&out).unwrap();
    assert!(!schedule.truncation.unwrap().feasible);
}

#[test]
fn run_on_a_clean_population_accepts_h() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = dir.path().join("s.json");
    assert_eq!(
        bin(&[
            "calibrate",
            "--config",
            &config("n100.toml"),
            "--out",
            schedule.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    let data = dir.path().join("clean.csv");
    std::fs::write(&data, format!("flag\n{}", "0\n".repeat(100))).unwrap();
    let out = dir.path().join("run.json");
    let o = bin(&[
        "run",
        "--schedule",
        schedule.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--order-seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let export: SessionExport = load_artifact(&out).unwrap();
    assert_eq!(export.status, Status::AcceptedH);
    assert!(export.tau.unwrap() < 100);
    assert!(stderr(&o).contains("accepted_h at tau ="));

    std::fs::write(&data, format!("flag\n{}2\n", "0\n".repeat(16))).unwrap();
    let bad = bin(&[
        "run",
        "--schedule",
        schedule.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("line 18"), "{}", stderr(&bad));

    let mixed = bin(&[
        "run",
        "--schedule",
        schedule.to_str().unwrap(),
        "--n",
        "100",
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(mixed.status.code(), Some(1));
    assert!(stderr(&mixed).contains("--schedule"));
}

#[test]
fn oc_and_replay_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    assert_eq!(
        bin(&[
            "calibrate",
            "--config",
            &config("n100.toml"),
            "--out",
            path.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    let schedule = load_schedule(&path).unwrap();

    let oc = bin(&[
        "oc",
        "--schedule",
        path.to_str().unwrap(),
        "--grid",
        "0-5,20,30-32",
        "--reps",
        "400",
        "--seed",
        "77",
    ]);
    assert_eq!(oc.status.code(), Some(0), "{}", stderr(&oc));
    let grid = [0, 1, 2, 3, 4, 5, 20, 30, 31, 32];
    let expected = OcExport::new(&schedule, 77, 400, oc_curve(&schedule, &grid, 400, 77).unwrap());
    assert_eq!(stdout(&oc), artifact_to_string(&expected).unwrap());

    let out = dir.path().join("oc.csv");
    let o = bin(&[
        "oc",
        "--schedule",
        path.to_str().unwrap(),
        "--grid",
        "all",
        "--reps",
        "200",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 102);
    let json: OcExport = load_artifact(&dir.path().join("oc.json")).unwrap();
    assert_eq!(json.seed, schedule.config.seed + 1);

    let reused = bin(&[
        "oc",
        "--schedule",
        path.to_str().unwrap(),
        "--seed",
        &schedule.config.seed.to_string(),
    ]);
    assert_eq!(reused.status.code(), Some(1));
    assert!(stderr(&reused).contains("--seed"));

    let rep = bin(&[
        "replay",
        "--schedule",
        path.to_str().unwrap(),
        "--synth",
        "100,12",
        "--reps",
        "300",
        "--seed",
        "5",
    ]);
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    let summary = replay(&synth_population(100, 12).unwrap(), &schedule, 300, 5).unwrap();
    assert_eq!(
        stdout(&rep),
        artifact_to_string(&ReplayExport::new(&schedule, 5, summary)).unwrap()
    );

    let hist = dir.path().join("r.json");
    let o = bin(&[
        "replay",
        "--schedule",
        path.to_str().unwrap(),
        "--synth",
        "100,30",
        "--reps",
        "50",
        "--out",
        hist.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("tau,count\n"));
    let total: u32 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u32>().unwrap())
        .sum();
    assert_eq!(total, 50);

    let wrong_n = bin(&["replay", "--schedule", path.to_str().unwrap(), "--synth", "99,3"]);
    assert_eq!(wrong_n.status.code(), Some(1));
}
