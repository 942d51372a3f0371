//! Compiles a C client against the generated header and static library.

use std::path::PathBuf;
use std::process::Command;

use blockfed::config::{DataSource, ExperimentConfig};

/// `target/<profile>`, where cargo put this crate's static library.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().to_path_buf()
}

#[test]
fn c_client_builds_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libblockfed_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler runs");
    assert!(status.success());

    let mut c = ExperimentConfig::desk_default();
    c.plan.rounds = 2;
    c.fl.epochs = 1;
    if let DataSource::Synthetic(s) = &mut c.dataset.source {
        s.samples_per_class = 40;
    }
    let out = Command::new(&exe).arg(c.to_json()).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in &lines[..2] {
        let m: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(m["accuracy"].as_f64().is_some());
    }
    assert_eq!(lines[2], "nhsic 1.000000");
}
