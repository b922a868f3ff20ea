use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pseudorate_core::codec::Canonical;
use pseudorate_core::scenario::ChainBundle;

fn pseudorate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudorate")).args(args).env_remove("PSEUDORATE_PORT").output().unwrap()
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn demo_is_deterministic_across_runs_and_transports() {
    let a = pseudorate(&["demo", "--seed", "42", "--format", "canonical"]);
    let b = pseudorate(&["demo", "--seed", "42", "--format", "canonical"]);
    let c = pseudorate(&["demo", "--seed", "42", "--format", "canonical", "--transport", "socket"]);
    assert_eq!(status(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(status(&c), 0, "{}", String::from_utf8_lossy(&c.stderr));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);

    let other = pseudorate(&["demo", "--seed", "43", "--format", "canonical"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn text_transcript_reports_scores_and_balances() {
    let out = pseudorate(&["demo"]);
    assert_eq!(status(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seller-17"), "{text}");
    assert!(text.contains("7/2"), "{text}");
}

#[test]
fn exported_chains_verify_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let chains = dir.path().join("chains");
    let transcript = dir.path().join("t.bin");
    let out = pseudorate(&["demo", "--format", "canonical", "--out", path(&transcript), "--export-chains", path(&chains)]);
    assert_eq!(status(&out), 0);

    let first = chains.join("chain-0.bin");
    assert_eq!(status(&pseudorate(&["verify", path(&first)])), 0);
    assert_eq!(status(&pseudorate(&["verify", path(&transcript)])), 0);

    let mut bundle = ChainBundle::decode(&fs::read(&first).unwrap()).unwrap();
    bundle.chain.rating_cred.signature[0] ^= 1;
    fs::write(&first, bundle.encode()).unwrap();
    let out = pseudorate(&["verify", path(&first)]);
    assert_eq!(status(&out), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("invalid"));

    fs::write(&first, b"not a bundle").unwrap();
    assert_eq!(status(&pseudorate(&["verify", path(&first)])), 3);
}

#[test]
fn bad_input_maps_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    fs::write(&scenario, "seed = \"twelve\"\n").unwrap();
    assert_eq!(status(&pseudorate(&["run", path(&scenario)])), 3);

    fs::write(&scenario, "[[groups]]\nprice = 10\nimpact = \"0\"\n").unwrap();
    assert_eq!(status(&pseudorate(&["run", path(&scenario)])), 3);

    assert_eq!(status(&pseudorate(&["frobnicate"])), 2);
    assert_eq!(status(&pseudorate(&["demo", "--transport", "carrier-pigeon"])), 2);
    assert_eq!(status(&pseudorate(&["score", "x", "--log", path(&dir.path().join("missing.log"))])), 3);
}

#[test]
fn score_reads_a_persisted_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(status(&pseudorate(&["demo", "--data-dir", path(&data)])), 0);
    let out = pseudorate(&["score", "seller-17", "--data-dir", path(&data)]);
    assert_eq!(status(&out), 0);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "seller-17 7/2 ~3.500000 (2 ratings)");

    // a second run must not silently mix into existing state
    assert_ne!(status(&pseudorate(&["demo", "--data-dir", path(&data)])), 0);
}
