//! Acceptance gate for the CLI crate: criterion 8 of the workspace gate.
//! Every artifact a run writes must be byte-identical whatever the worker
//! count, and a repeated run of the same config must reproduce them again;
//! the manifest may differ only in its wall_time_s field. One PASS or FAIL
//! line, nonzero exit on failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Outcome = Result<String, String>;

fn main() {
    let start = Instant::now();
    let outcome = run();
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("[8/8] artifact-reproducibility              PASS ({elapsed:.1}s) {detail}");
        }
        Err(detail) => {
            println!("[8/8] artifact-reproducibility              FAIL ({elapsed:.1}s) {detail}");
            std::process::exit(1);
        }
    }
}

fn run() -> Outcome {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = scratch.path();

    let compare_cfg = root.join("compare.json");
    fs::write(
        &compare_cfg,
        format!(
            r#"{{
  "version": 1,
  "seed": 9,
  "preset": "cubic-gap",
  "paths": 12,
  "levels": 2,
  "params": {{}},
  "out_dir": {:?}
}}"#,
            root.join("cmp").to_str().unwrap()
        ),
    )
    .map_err(|e| e.to_string())?;

    let simulate_cfg = root.join("simulate.json");
    fs::write(
        &simulate_cfg,
        format!(
            r#"{{
  "version": 1,
  "seed": 11,
  "preset": "affine",
  "params": {{}},
  "equation": "first",
  "grid": {{ "extent": [[0.0, 1.0]], "n": [31] }},
  "time": {{ "t_end": 0.25, "steps": 50 }},
  "init": {{ "profile": "sine", "amplitude": 0.3 }},
  "out_dir": {:?}
}}"#,
            root.join("sim").to_str().unwrap()
        ),
    )
    .map_err(|e| e.to_string())?;

    let ledger_cfg = root.join("ledger.json");
    fs::write(
        &ledger_cfg,
        format!(
            r#"{{
  "version": 1,
  "seed": 3,
  "driver": {{ "family": "martingale-increment", "rate": 1.0 }},
  "n": 60,
  "time": {{ "t_end": 1.0, "steps": 40 }},
  "path": 0,
  "out_dir": {:?}
}}"#,
            root.join("led").to_str().unwrap()
        ),
    )
    .map_err(|e| e.to_string())?;

    let jobs: Vec<(&str, Vec<String>, std::path::PathBuf)> = vec![
        (
            "compare",
            vec![
                "compare".into(),
                "--config".into(),
                compare_cfg.to_str().unwrap().into(),
            ],
            root.join("cmp"),
        ),
        (
            "simulate",
            vec![
                "simulate".into(),
                "--config".into(),
                simulate_cfg.to_str().unwrap().into(),
            ],
            root.join("sim"),
        ),
        (
            "ledger",
            vec![
                "ledger".into(),
                "--config".into(),
                ledger_cfg.to_str().unwrap().into(),
            ],
            root.join("led"),
        ),
        (
            "counterexample",
            vec![
                "counterexample".into(),
                "--T".into(),
                "1.0".into(),
                "--intensity".into(),
                "1.0".into(),
                "--paths".into(),
                "2000".into(),
                "--seed".into(),
                "5".into(),
                "--out-dir".into(),
                root.join("ctr").to_str().unwrap().into(),
            ],
            root.join("ctr"),
        ),
    ];

    let mut compared_files = 0usize;
    for (label, args, out_dir) in &jobs {
        // Same config and out_dir throughout, so the manifest echo matches;
        // stash the bytes of each run before the next one overwrites them.
        let first = run_and_collect(args, "1", out_dir)?;
        for workers in ["4", "2"] {
            let again = run_and_collect(args, workers, out_dir)?;
            compare_runs(label, workers, &first, &again)?;
        }
        // Repeatability at a fixed worker count.
        let repeat = run_and_collect(args, "1", out_dir)?;
        compare_runs(label, "1 (rerun)", &first, &repeat)?;
        compared_files += first.len();
    }

    Ok(format!(
        "4 commands x 3 re-runs (workers 1, 4, 2 and a repeat): {compared_files} artifacts byte-identical, manifests equal up to wall_time_s"
    ))
}

fn run_and_collect(
    args: &[String],
    workers: &str,
    out_dir: &Path,
) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_sidelab"))
        .args(args)
        .arg("--workers")
        .arg(workers)
        .output()
        .map_err(|e| format!("failed to launch binary: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "{:?} --workers {workers} exited with {:?}: {}",
            args.first().unwrap(),
            output.status.code(),
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(out_dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(name, bytes);
    }
    if files.is_empty() {
        return Err(format!("{args:?} wrote no artifacts to {}", out_dir.display()));
    }
    Ok(files)
}

fn compare_runs(
    label: &str,
    workers: &str,
    first: &BTreeMap<String, Vec<u8>>,
    again: &BTreeMap<String, Vec<u8>>,
) -> Result<(), String> {
    let names: Vec<&String> = first.keys().collect();
    let names_again: Vec<&String> = again.keys().collect();
    if names != names_again {
        return Err(format!(
            "{label}: artifact sets differ between runs: {names:?} vs {names_again:?}"
        ));
    }
    for (name, bytes) in first {
        let other = &again[name];
        if name == "manifest.json" {
            let a = scrub_wall_time(bytes)
                .map_err(|e| format!("{label}: first manifest unreadable: {e}"))?;
            let b = scrub_wall_time(other)
                .map_err(|e| format!("{label}: rerun manifest unreadable: {e}"))?;
            if a != b {
                return Err(format!(
                    "{label}: manifests differ beyond wall_time_s at workers {workers}"
                ));
            }
        } else if bytes != other {
            return Err(format!(
                "{label}: {name} differs at workers {workers} ({} vs {} bytes)",
                bytes.len(),
                other.len()
            ));
        }
    }
    Ok(())
}

fn scrub_wall_time(bytes: &[u8]) -> Result<serde_json::Value, String> {
    let mut v: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    let obj = v
        .as_object_mut()
        .ok_or("manifest is not a JSON object")?;
    if obj.remove("wall_time_s").is_none() {
        return Err("manifest lacks wall_time_s".to_string());
    }
    Ok(v)
}
