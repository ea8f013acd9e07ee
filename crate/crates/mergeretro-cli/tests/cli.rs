//! End-to-end checks of the command-line interface: the full
//! simulate -> classify -> estimate pipeline, exit codes, and seeded
//! determinism of every output file.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mergeretro"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn mergeretro")
}

fn write(dir: &Path, name: &str, contents: &str) {
    fs::write(dir.join(name), contents).unwrap();
}

#[test]
fn simulate_then_estimate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = run_in(dir, &["simulate", "--out", "sim", "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("sim/panel.csv").exists());
    assert!(dir.join("sim/truth.json").exists());
    assert!(dir.join("sim/resolved_config.json").exists());

    write(
        dir,
        "did.json",
        r#"{"panel": {"panel_csv": "sim/panel.csv", "merger_quarter": 8},
            "spec": {"outcome": {"var": "price", "log": true}}}"#,
    );
    let out = run_in(dir, &["did", "--config", "did.json", "--out", "did"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let did: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("did/did.json")).unwrap()).unwrap();
    assert!(did["report"]["n_obs"].as_u64().unwrap() > 0);
    assert!(did["percent_effect"].is_number());

    write(
        dir,
        "structural.json",
        r#"{"panel": {"panel_csv": "sim/panel.csv", "merger_quarter": 8}}"#,
    );
    let out = run_in(dir, &["structural", "--config", "structural.json", "--out", "st"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let st: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("st/structural.json")).unwrap())
            .unwrap();
    // The default calibration raises conduct by about 0.107; a single panel
    // estimate should land in a loose band around it.
    let dl = st["delta_lambda"].as_f64().unwrap();
    assert!((-0.2..0.4).contains(&dl), "delta_lambda {dl}");
    assert!(st["demand_first_stage_f"].as_f64().unwrap() > 10.0);
}

#[test]
fn classify_reads_presence_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "presence.csv",
        "market,carrier,nonstop_ops_per_quarter,pax_share,connect_share\n\
         BOS-DCA,AA,30,0.4,0.0\n\
         BOS-DCA,US,25,0.3,0.0\n\
         SEA-MSP,AA,30,0.6,0.0\n\
         SEA-MSP,DL,12,0.4,0.05\n",
    );
    write(
        dir,
        "classify.json",
        r#"{"presence_csv": "presence.csv", "merging": ["AA", "US"]}"#,
    );
    let out = run_in(dir, &["classify", "--config", "classify.json", "--out", "cls"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cls: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("cls/classification.json")).unwrap())
            .unwrap();
    assert_eq!(cls["BOS-DCA"], "Treated");
    assert_eq!(cls["SEA-MSP"], "Control");
}

#[test]
fn bad_configs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Missing config file.
    let out = run_in(dir, &["did", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown field is rejected rather than silently ignored.
    write(
        dir,
        "bad.json",
        r#"{"panel": {"panel_csv": "x.csv", "merger_quarter": 8},
            "spec": {"outcome": {"var": "price", "log": true}},
            "typo_field": 1}"#,
    );
    let out = run_in(dir, &["did", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown subcommand / flag errors from the parser also map to 2.
    let out = run_in(dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out_dir in ["a", "b"] {
        let out = run_in(dir, &["simulate", "--out", out_dir, "--seed", "5"]);
        assert!(out.status.success());
        write(
            dir,
            &format!("sgmm_{out_dir}.json"),
            &format!(
                r#"{{"panel": {{"panel_csv": "{out_dir}/panel.csv", "merger_quarter": 8}},
                     "bootstrap": {{"replicates": 10, "seed": 3}}}}"#
            ),
        );
        let out = run_in(
            dir,
            &[
                "sgmm",
                "--config",
                &format!("sgmm_{out_dir}.json"),
                "--out",
                &format!("{out_dir}_sgmm"),
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["panel.csv", "truth.json"] {
        assert_eq!(
            fs::read(dir.join("a").join(name)).unwrap(),
            fs::read(dir.join("b").join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    assert_eq!(
        fs::read(dir.join("a_sgmm/sgmm.json")).unwrap(),
        fs::read(dir.join("b_sgmm/sgmm.json")).unwrap(),
        "sgmm.json differs between identical runs"
    );
}

#[test]
fn montecarlo_is_thread_count_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "mc.json",
        r#"{"replications": 4, "statistic": "delta_lambda"}"#,
    );
    for (out_dir, threads) in [("t1", "1"), ("t4", "4")] {
        let out = run_in(
            dir,
            &[
                "montecarlo", "--config", "mc.json", "--out", out_dir, "--seed", "9",
                "--threads", threads,
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.join(d).join("montecarlo.json")).unwrap())
            .unwrap()
    };
    assert_eq!(read("t1")["result"]["estimates"], read("t4")["result"]["estimates"]);
}
