use std::path::Path;
use std::process::{Command, Output};

use aid_core::data::{load_aida, load_sequence, save_sequence, ImageSequence};
use aid_core::{ComplexArray2D, RngStream};
use serde_json::Value;

/// Runs `aid` in `dir` with a whitespace-separated command line.
fn aid(dir: &Path, cmd: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aid"))
        .args(cmd.split_whitespace())
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, cmd: &str) -> Output {
    let out = aid(dir, cmd);
    assert!(
        out.status.success(),
        "aid {cmd}: {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, cmd: &str) -> i32 {
    aid(dir, cmd).status.code().unwrap()
}

const TINY: &str = "train --synthetic --size 16 --frames 4 --steps 20 --T 20 --dim 8 --hidden 8";

fn tiny_checkpoint(dir: &Path, out: &str, seed: u64) {
    ok(dir, &format!("{TINY} --out {out} --seed {seed}"));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write_random_sequence(path: impl AsRef<Path>, seed: u64) -> Vec<ComplexArray2D> {
    let mut rng = RngStream::new(seed, 0);
    let frames: Vec<ComplexArray2D> = (0..2).map(|_| rng.normal_array(8, 8)).collect();
    save_sequence(path, &ImageSequence::new(frames.clone()).unwrap()).unwrap();
    frames
}

#[test]
fn synthetic_training_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(
        tmp.path(),
        "train --synthetic --frames 6 --size 32 --steps 500 --seed 7 --out ckpt",
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 500);
    let curve = read_json(tmp.path().join("ckpt/loss_curve.json"));
    let losses: Vec<f64> = curve["losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 500);
    let means: Vec<f64> = losses
        .chunks(100)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means[4] < 0.7 * means[0], "windowed losses {means:?}");
    assert!(tmp.path().join("ckpt/header.json").is_file());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_checkpoint(d, "a", 3);
    tiny_checkpoint(d, "b", 3);
    tiny_checkpoint(d, "c", 4);
    let a = dir_bytes(&d.join("a"));
    assert_eq!(a, dir_bytes(&d.join("b")));
    assert_ne!(a, dir_bytes(&d.join("c")));
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_checkpoint(d, "ckpt", 1);
    ok(
        d,
        "sample --checkpoint ckpt --mode cold --frames 2 --out seq.aida",
    );
    ok(d, "simulate --input seq.aida --out ks");

    assert_eq!(code(d, &format!("{TINY} --out no/such/dir/ckpt")), 2);
    assert_eq!(
        code(
            d,
            "sample --checkpoint ckpt --mode retrospective --frames 2 --out r.aida"
        ),
        2
    );
    assert_eq!(
        code(d, "recon --kspace ks --checkpoint ckpt --S 1 --out rc"),
        2
    );
    assert_eq!(
        code(d, "simulate --input seq.aida --mask no-such-mask --out ks2"),
        2
    );
    assert_eq!(code(d, "train --bogus"), 2);

    std::fs::write(d.join("bad.json"), r#"{"steps": 3, "colour": "blue"}"#).unwrap();
    assert_eq!(code(d, &format!("--config bad.json {TINY} --out x")), 2);
}

#[test]
fn io_errors_exit_with_4_and_help_with_0() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(
        code(d, "metrics --reference nope.aida --estimate nope.aida"),
        4
    );
    std::fs::write(d.join("junk.aida"), b"not an array").unwrap();
    assert_eq!(
        code(d, "metrics --reference junk.aida --estimate junk.aida"),
        4
    );
    assert_eq!(code(d, "--help"), 0);
}

#[test]
fn config_file_sits_beneath_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.json"), r#"{"steps": 7, "dim": 8, "seed": 5}"#).unwrap();
    let out = ok(
        d,
        "--config run.json train --synthetic --size 16 --frames 3 --T 10 --hidden 8 --steps 4 --out ckpt",
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    assert_eq!(read_json(d.join("ckpt/loss_curve.json"))["seed"], 5);
}

#[test]
fn cold_sampling_emits_the_requested_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_checkpoint(d, "ckpt", 2);
    ok(
        d,
        "sample --checkpoint ckpt --mode cold --frames 8 --out seq.aida",
    );
    assert_eq!(load_sequence(d.join("seq.aida")).unwrap().len(), 8);
    for i in 0..8 {
        assert!(d.join(format!("seq_{i:03}.pgm")).is_file());
    }
}

#[test]
fn noiseless_simulation_matches_the_forward_model_and_metrics_are_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let frames = write_random_sequence(d.join("seq.aida"), 8);
    ok(
        d,
        "simulate --input seq.aida --mask odd-lines --coils 1 --noise 0 --out ks",
    );
    let (fwd, ys) = aid_core::cli::load_kspace_dir(&d.join("ks")).unwrap();
    for (x, y) in frames.iter().zip(&ys) {
        let exact = aid_core::mri::apply_forward(&fwd, x).unwrap();
        assert_eq!(exact.coils()[0].max_abs_diff(&y.coils()[0]), 0.0);
    }
    assert_eq!(load_aida(d.join("ks/mask.aida")).unwrap().dims, vec![8, 8]);

    let out = ok(
        d,
        "metrics --reference seq.aida --estimate seq.aida --out m.jsonl",
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, std::fs::read_to_string(d.join("m.jsonl")).unwrap());
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let keys: Vec<_> = l.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["frame", "nrmse", "psnr_db"]);
        assert_eq!(l["frame"], i);
        assert_eq!(l["nrmse"], 0.0);
        assert!(l["psnr_db"].is_null());
    }
}

#[test]
fn gaussian_prior_reconstruction_writes_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_random_sequence(d.join("seq.aida"), 9);
    ok(
        d,
        "simulate --input seq.aida --mask equispaced-acs --R 2 --noise 0.01 --out ks",
    );
    let out = ok(
        d,
        "recon --kspace ks --prior gaussian --T 20 --S 4 --K 2 --reference seq.aida --out rc",
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    let samples = load_aida(d.join("rc/samples.aida")).unwrap();
    assert_eq!(samples.dims, vec![2, 4, 8, 8]);
    for name in ["mean", "variance", "ci", "zero_filled"] {
        assert!(d.join(format!("rc/{name}.aida")).is_file(), "{name}");
    }
    let ci = load_aida(d.join("rc/ci.aida")).unwrap();
    assert!(ci.as_f64().unwrap().iter().all(|&v| v >= 0.0));
}

#[test]
fn explicit_false_overrides_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_random_sequence(d.join("seq.aida"), 10);
    ok(d, "simulate --input seq.aida --mask odd-lines --out ks");
    std::fs::write(d.join("on.json"), r#"{"noise-inject": true}"#).unwrap();
    let base = "recon --kspace ks --prior gaussian --T 20 --S 2 --K 1";
    ok(d, &format!("{base} --noise-inject true --out on"));
    ok(d, &format!("{base} --noise-inject false --out off"));
    ok(d, &format!("--config on.json {base} --noise-inject false --out off2"));
    let samples = |dir: &str| std::fs::read(d.join(dir).join("samples.aida")).unwrap();
    assert_ne!(samples("on"), samples("off"));
    assert_eq!(samples("off"), samples("off2"));

    // switches set only in the file still apply
    std::fs::write(d.join("syn.json"), r#"{"synthetic": true, "unconditional": true}"#).unwrap();
    ok(
        d,
        "--config syn.json train --size 16 --frames 3 --T 10 --dim 8 --hidden 8 --steps 2 --out ck",
    );
    let header = read_json(d.join("ck/header.json"));
    assert!(header.to_string().contains("\"conditional\":false"), "{header}");
}
