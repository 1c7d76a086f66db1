//! End-to-end exercise of the command-line surface on a tiny run:
//! gen-data → train → synth → eval → ablate, plus the exit-code contract.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylecodec"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
[dataset]
n_train = 40
n_test_in_domain = 10
n_test_heldout_style = 8
n_test_heldout_speaker = 8

[model]
d_hidden = 16
d_embed = 8
mdn_hidden = 8
text_blocks = 1
decoder_blocks = 1

[model.schedule]
first_channel_iters = 2
other_channel_iters = 1

[model.fusion]
d_fusion = 16
extractor_blocks = 1

[training]
batch_frames = 128
total_steps = 6
warmup_steps = 2
fusion_steps = 3

[ablation]
k_values = [3]
include_mode_grid = false
total_steps = 3
batch_frames = 96
m2m_samples = 2

[eval]
n = 5
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    // gen-data twice: second without --force must fail, with --force succeed
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("train=40"), "split sizes printed: {stdout}");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("test_heldout_speaker.jsonl").exists());
    assert!(data.join("run_config.toml").exists());

    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(!out.status.success(), "refuses to clobber without --force");

    let out = bin()
        .args(["gen-data", "--force", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());

    // train
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(run.join("train_log.jsonl").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "l_codec", "l_dur", "l_style"] {
        assert!(first.get(key).is_some(), "log record has {key}");
    }

    // synth via speaker id and via STYLECODEC_DATA_ROOT
    let out = bin()
        .args(["synth", "--ckpt"])
        .arg(&ckpt)
        .args(["--style-text", "a loud fast high-pitched happy woman", "--timbre-from", "0", "--n", "2", "--seed", "5"])
        .env("STYLECODEC_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 2, "one record per sample");
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(rec.get("attributes").is_some());

    // same seed reproduces bit-identical output
    let out2 = bin()
        .args(["synth", "--ckpt"])
        .arg(&ckpt)
        .args(["--style-text", "a loud fast high-pitched happy woman", "--timbre-from", "0", "--n", "2", "--seed", "5"])
        .env("STYLECODEC_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert_eq!(out.stdout, out2.stdout);

    // unknown speaker id
    let out = bin()
        .args(["synth", "--ckpt"])
        .arg(&ckpt)
        .args(["--style-text", "a plain voice", "--timbre-from", "999"])
        .env("STYLECODEC_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(!out.status.success());

    // all-OOV style text still runs, flagged on stderr
    let out = bin()
        .args(["synth", "--ckpt"])
        .arg(&ckpt)
        .args(["--style-text", "zzz qqq", "--timbre-from", "1"])
        .env("STYLECODEC_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of vocabulary"));

    // eval
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--split", "in_domain", "--n", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("in_domain"));

    // ablate (single tiny cell)
    let ab = dir.path().join("ablate");
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ab)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ab.join("summary.jsonl").exists());
    assert!(ab.join("table.txt").exists());
}

#[test]
fn config_errors_exit_with_code_3() {
    let out = bin()
        .args(["gen-data", "--config", "/nonexistent/nope.toml", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // schema violation in the file
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 99\n").unwrap();
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invariant_violations_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    for args in [
        vec!["gen-data".to_string()],
        vec!["train".to_string()],
    ] {
        let mut cmd = bin();
        cmd.arg(&args[0]).arg("--config").arg(&config);
        if args[0] == "gen-data" {
            cmd.arg("--out").arg(&data);
        } else {
            cmd.arg("--data").arg(&data).arg("--out").arg(&run);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    // poison the train split with a heldout template id (id 12+ is heldout
    // in the builtin bank) and expect the eval invariant gate to trip
    let train_path = data.join("train.jsonl");
    let text = std::fs::read_to_string(&train_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(|s| s.to_string()).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    rec["template_id"] = serde_json::json!(12);
    lines[0] = serde_json::to_string(&rec).unwrap();
    std::fs::write(&train_path, lines.join("\n") + "\n").unwrap();

    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(run.join("checkpoint.bin"))
        .arg("--data")
        .arg(&data)
        .args(["--split", "in_domain", "--n", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
