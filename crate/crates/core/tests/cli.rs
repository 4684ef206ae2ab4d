use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spikelab::io::{load_model, load_tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikelab"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

#[test]
fn zero_input_has_no_saturation() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), "c.toml", "[simulate]\ninput_kind = \"zeros\"\n");
    let o = run(d.path(), &["--config", &c, "simulate", "--out", "out"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert!(j.get("firing_rate").is_some());
    assert_eq!(j["lfsi"], 0.0);
    assert!(d.path().join("out/report.json").is_file());
    let csv = fs::read_to_string(d.path().join("out/report.csv")).unwrap();
    assert!(csv.starts_with("layer,lfsi,firing_rate"));
    assert!(csv.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn mdsnet10_report_has_four_stages() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        "c.toml",
        "[network]\npreset = \"mdsnet10\"\nwidth = 0.125\nin_channels = 2\n[metrics]\nlfsi_windows = [3, 1, 5]\n[simulate]\ninput_size = [64, 64]\n",
    );
    let o = run(d.path(), &["--config", &c, "simulate", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert_eq!(j["network"], "MDSNet10");
    let stages: Vec<&str> = j["stages"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(stages, ["stage1", "stage2", "stage3", "stage4"]);
    assert_eq!(j["lfsi_sweep"].as_array().unwrap().len(), 3);
    assert_eq!(j["lfsi_sweep"][0]["lfsi"], j["lfsi"]);
    assert_eq!(j["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["--config", "missing.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    let c = write_config(d.path(), "bad.toml", "[network]\nunknown_key = 1\n");
    assert_eq!(run(d.path(), &["--config", &c, "simulate"]).status.code(), Some(2));
    let c = write_config(d.path(), "in.toml", "[simulate]\ninput = \"nothing.sdt\"\n");
    assert_eq!(run(d.path(), &["--config", &c, "simulate"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["verify", "--format", "xml"]).status.code(), Some(2));
    let o = bin().current_dir(d.path()).env("SPIKEDET_THREADS", "zero").arg("simulate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_cap_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    let o = bin()
        .current_dir(d.path())
        .env("SPIKEDET_THREADS", "2")
        .args(["verify", "--check", "prop2"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn untrained_snapshot_round_trips_through_simulate() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), "t.toml", "[train]\nepochs = 0\ntrain_size = 16\ntest_size = 8\nimage_size = 16\n");
    let o = run(d.path(), &["--config", &c, "train", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert_eq!(j["epochs"], 0);
    let model = d.path().join("run/model.sdl");
    let (net, _) = load_model(&model).unwrap();
    assert_eq!(net.spec.name, "toy");
    let hist = fs::read_to_string(d.path().join("run/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 2);

    let s = write_config(d.path(), "s.toml", "[simulate]\nmodel = \"run/model.sdl\"\ninput_size = [16, 16]\n");
    let o = run(d.path(), &["--config", &s, "simulate", "--out", "sim"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pinned_training_history_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        "t.toml",
        "seed = 5\n[network]\nwidths = [8, 8]\nenc_channels = 4\n[train]\nepochs = 2\ntrain_size = 32\ntest_size = 16\nimage_size = 16\nbatch_size = 8\n",
    );
    for out in ["a", "b"] {
        let o = run(d.path(), &["--config", &c, "train", "--out", out, "--format", "csv"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(d.path().join("a/history.csv")).unwrap();
    let b = fs::read(d.path().join("b/history.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(d.path().join("a/model.sdl")).unwrap(), fs::read(d.path().join("b/model.sdl")).unwrap());
}

#[test]
fn corrupt_model_reports_magic_bytes() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.sdl"), b"JUNKJUNKJUNK").unwrap();
    let c = write_config(d.path(), "c.toml", "[simulate]\nmodel = \"bad.sdl\"\n");
    let o = run(d.path(), &["--config", &c, "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn verify_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["verify", "--check", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d.path(), &["verify", "--check", "prop1", "--negative-control"]);
    assert_eq!(o.status.code(), Some(3));
    let j = stdout_json(&o);
    assert_eq!(j["checks"][0]["pass"], false);
    let o = run(
        d.path(),
        &["verify", "--check", "prop1", "--check", "prop2", "--check", "variance", "--check", "saturation"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(d.path().join("out/verify.json").is_file());
}

#[test]
fn default_suite_exit_code_matches_report() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["verify", "--seed", "0"]);
    let j = stdout_json(&o);
    let all = j["pass"].as_bool().unwrap();
    assert_eq!(j["checks"].as_array().unwrap().len(), 5);
    assert_eq!(o.status.code(), Some(if all { 0 } else { 3 }));
}

#[test]
fn events_encode_to_counts() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ev.csv"), "t,x,y,p\n10,0,0,1\n30000,3,2,0\n99000,3,2,0\n100000,1,1,1\n").unwrap();
    let c = write_config(
        d.path(),
        "e.toml",
        "[encode]\nevents = \"ev.csv\"\nt_steps = 4\nwindow_us = 100000\nwidth = 4\nheight = 3\noutput = \"ev.sdt\"\n",
    );
    let o = run(d.path(), &["--config", &c, "encode", "--out", "enc"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let x = load_tensor(d.path().join("enc/ev.sdt")).unwrap();
    assert_eq!(x.sum(), 4.0);
    assert_eq!(x.shape().dims(), [4, 1, 2, 3, 4]);
    assert_eq!(stdout_json(&o)["events"], 4);
}

#[test]
fn malformed_event_line_reports_line_number() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ev.csv"), "10,0,0,1\n20,0,zero,1\n").unwrap();
    let c = write_config(d.path(), "e.toml", "[encode]\nevents = \"ev.csv\"\nwidth = 4\nheight = 4\n");
    let o = run(d.path(), &["--config", &c, "encode"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn image_encodes_to_identical_slices() {
    let d = tempfile::tempdir().unwrap();
    let img = image::GrayImage::from_fn(5, 3, |x, y| image::Luma([(x * 40 + y * 7) as u8]));
    img.save(d.path().join("frame.png")).unwrap();
    let c = write_config(d.path(), "e.toml", "[encode]\nimage = \"frame.png\"\nt_steps = 4\noutput = \"img.sdt\"\n");
    let o = run(d.path(), &["--config", &c, "encode"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let x = load_tensor(d.path().join("out/img.sdt")).unwrap();
    assert_eq!(x.shape().dims(), [4, 1, 1, 3, 5]);
    for t in 1..4 {
        assert_eq!(x.time_slice(t), x.time_slice(0));
    }
    assert!((x.get(0, 0, 0, 2, 4) - (4.0 * 40.0 + 14.0) / 255.0).abs() < 1e-12);
}

#[test]
fn encode_needs_one_source() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["encode"]).status.code(), Some(2));
}
