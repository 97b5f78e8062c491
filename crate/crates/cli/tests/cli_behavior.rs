//! Command-line contract: exit codes, flag rejection, help coverage, and
//! the data-vs-diagnostics stream split.

use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_permlm")
}

#[test]
fn usage_errors_exit_with_code_2() {
    let out = Command::new(binary()).args(["dump-masks", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown flags must be usage errors");
    let out = Command::new(binary()).arg("no-such-subcommand").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_1_on_stderr() {
    let out = Command::new(binary())
        .args(["pretrain", "--objective", "plm", "/nonexistent/corpus.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = Command::new(binary())
        .args(["pretrain", "--objective", "bogus", "/nonexistent/corpus.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "pretrain",
        "finetune",
        "eval-ppl",
        "dump-masks",
        "coverage",
        "dump-attention",
        "grad-check",
        "oracle-check",
    ] {
        let out = Command::new(binary()).args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help failed");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--seed") || sub == "dump-masks" && text.contains("--perm") || text.contains("Usage"));
    }
}

#[test]
fn runs_announce_config_and_seed_on_stderr_only() {
    let out = Command::new(binary())
        .args(["dump-masks", "--perm", "2,1", "--mem", "0", "--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("seed = 5"));
    assert!(stderr.contains("resolved configuration"));
    // stdout stays pure data
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("perm=2,1 mem=0\n"));
    assert!(!stdout.contains("seed"));
}

#[test]
fn invalid_factorization_order_is_a_runtime_error() {
    let out = Command::new(binary()).args(["dump-masks", "--perm", "1,1,2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("repeated"));
}

#[test]
fn coverage_rejects_bad_target_count() {
    let out = Command::new(binary())
        .args(["coverage", "--seq-len", "4", "--targets", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
