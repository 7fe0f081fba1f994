use std::path::Path;
use std::process::Command;

fn trim(dir: &Path, args: &[&str]) {
    let config = dir.join("run.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_trim"))
        .arg("--config")
        .arg(&config)
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "trim {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn data_rows(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(text.starts_with("# schema_version"), "{}", path.display());
    text.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        r#"
[denoiser]
side = 8
steps = 8

[data]
prompts = 3
seeds = 4
image_size = 16

[pairs]
quota = 4

[train]
epochs = 2
batch_size = 8

[bench]
prompts = 1
repeats = 1

[scaling]
prompts = 2
values = [1, 2]

[diversity]
prompts = 2
repeats = 2
candidates = 2
"#,
    )
    .unwrap();

    trim(d, &["synth-data"]);
    assert!(d.join("dataset.trim").exists() && d.join("prompts.trim").exists());
    trim(d, &["build-pairs"]);
    assert_eq!(data_rows(&d.join("pair_bins.csv")), 11);
    trim(d, &["train-selector", "--epochs", "3"]);
    assert_eq!(data_rows(&d.join("train_loss.csv")), 3);
    trim(d, &["eval-selector"]);
    assert_eq!(data_rows(&d.join("selector_eval.csv")), 24);

    trim(
        d,
        &[
            "infer",
            "--mode",
            "+TRIM",
            "--candidates",
            "2",
            "--set",
            "inference.prompts=[0, 2]",
        ],
    );
    assert_eq!(data_rows(&d.join("infer/cost.csv")), 2);
    assert_eq!(data_rows(&d.join("infer/timing.csv")), 2);
    let p = d.join("infer/prompt0002");
    for f in ["splats.trim", "view0.ppm", "view0.f32", "mask.pbm", "tokens.csv"] {
        assert!(p.join(f).exists(), "missing {f}");
    }
    let ppm = std::fs::read(p.join("view0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);

    trim(
        d,
        &[
            "infer",
            "--mode",
            "baseline",
            "--candidates",
            "2",
            "--set",
            "inference.prompts=[1]",
        ],
    );
    assert!(!d.join("infer/prompt0001/mask.pbm").exists());

    trim(d, &["bench"]);
    assert!(data_rows(&d.join("bench.csv")) >= 1);
    trim(d, &["scaling", "--set", "scaling.judge=\"oracle\""]);
    assert_eq!(data_rows(&d.join("scaling.csv")), 2);
    trim(d, &["scaling", "--axis", "steps", "--values", "4,8"]);
    assert_eq!(data_rows(&d.join("scaling.csv")), 2);
    trim(d, &["diversity"]);
    assert_eq!(data_rows(&d.join("diversity.csv")), 4);

    let written = std::fs::read_to_string(d.join("config.toml")).unwrap();
    assert!(written.contains("side = 8"));
}

#[test]
fn bad_configuration_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[denoiser]\nstepz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_trim"))
        .arg("--config")
        .arg(dir.path().join("run.toml"))
        .arg("bench")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}
