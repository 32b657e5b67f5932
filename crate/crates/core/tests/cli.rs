use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ambi_upscale::io::write_wav;
use ndarray::Array2;

const TINY: &str = r#"
seed = 5
jobs = 2

[dataset]
n_clips = 4
synthetic_speakers = 12
synthetic_seconds = 1.0
split = { train = 0.5, val = 0.0, test = 0.5 }

[sampler]
predictor_steps = 2

[baseline]
grid_points = 64
solver = { max_iterations = 5 }

[plot]
azimuth_step_deg = 30.0
colatitude_step_deg = 30.0

[model.block1]
base_width = 8
depth = 2
res_units_per_level = 1
time_embed_dim = 8

[model.block2]
base_width = 8
depth = 2
res_units_per_level = 1
time_embed_dim = 8

[training.block1]
batch_size = 1
total_steps = 3
validation_every = 0
crop_bins = 16
crop_frames = 8

[training.block2]
batch_size = 1
total_steps = 3
validation_every = 0
crop_bins = 16
crop_frames = 8
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ambi-upscale"))
            .arg("--config")
            .arg(self.p("tiny.toml"))
            .args(args)
            .env_remove("AMBI_UPSCALE_CONFIG")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }

    fn dataset(&self, rel: &str) -> String {
        let d = self.s(rel);
        self.ok(&["synth-data", "--synthetic", "--out", &d]);
        d
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_data_is_seeded_and_validated() {
    let env = Env::new();
    env.dataset("a");
    env.dataset("b");
    assert_eq!(bytes(&env.p("a/manifest.jsonl")), bytes(&env.p("b/manifest.jsonl")));
    assert_eq!(bytes(&env.p("a/clips/clip00000.wav")), bytes(&env.p("b/clips/clip00000.wav")));
    let echoed = std::fs::read_to_string(env.p("a/run-config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"));

    let c = env.s("c");
    env.ok(&["--seed", "6", "synth-data", "--synthetic", "--out", &c]);
    assert_ne!(bytes(&env.p("a/manifest.jsonl")), bytes(&env.p("c/manifest.jsonl")));

    let missing = env.s("nowhere");
    assert_eq!(env.code(&["synth-data", "--corpus", &missing, "--out", &c]), 2);
    assert_eq!(env.code(&["synth-data", "--synthetic", "--n-clips", "0", "--out", &c]), 2);
    // clap usage errors
    assert_eq!(env.code(&["synth-data", "--out", &c]), 2);
}

#[test]
fn bad_config_exits_with_code_2() {
    let env = Env::new();
    std::fs::write(env.p("bad.toml"), "[schedule]\nsigma_min = 2.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ambi-upscale"))
        .args(["synth-data", "--synthetic", "--out"])
        .arg(env.p("x"))
        .env("AMBI_UPSCALE_CONFIG", env.p("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_upscale_eval_pipeline() {
    let env = Env::new();
    let data = env.dataset("data");
    let b1 = env.s("ckpt/b1.safetensors");
    let b2 = env.s("ckpt/b2.safetensors");
    env.ok(&["train", "--dataset", &data, "--block", "1", "--out", &b1]);
    env.ok(&["train", "--dataset", &data, "--block", "2", "--out", &b2]);
    let log = std::fs::read_to_string(env.p("ckpt/b1.loss.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // Same seed, same bytes.
    let again = env.s("ckpt/b1_again.safetensors");
    env.ok(&["train", "--dataset", &data, "--block", "1", "--out", &again]);
    assert_eq!(bytes(&env.p("ckpt/b1.safetensors")), bytes(&env.p("ckpt/b1_again.safetensors")));

    // Resuming appends to the loss history.
    let resumed = env.s("ckpt/b1_resumed.safetensors");
    env.ok(&["train", "--dataset", &data, "--block", "1", "--resume", &b1, "--steps", "2", "--out", &resumed]);
    let log = std::fs::read_to_string(env.p("ckpt/b1_resumed.loss.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3 + 2);

    // Swapped blocks are refused.
    let est = env.s("est");
    assert_eq!(env.code(&["upscale", "--input", &data, "--out", &est, "--block1", &b2, "--block2", &b1]), 2);

    let out = env.ok(&["upscale", "--input", &data, "--out", &est, "--block1", &b1, "--block2", &b2]);
    assert!(out.contains("upscaled"));
    let report = env.s("report");
    let table = env.ok(&["eval", "--estimates", &est, "--references", &data, "--out", &report]);
    assert!(table.contains("overall"), "{table}");
    assert!(env.p("report/report.json").exists());

    // An estimate with no matching reference.
    std::fs::copy(env.p("data/clips/clip00000.wav"), env.p("est/stranger.wav")).unwrap();
    assert_eq!(env.code(&["eval", "--estimates", &est, "--references", &data, "--out", &report]), 2);
}

#[test]
fn single_file_modes_check_channels() {
    let env = Env::new();
    let mut foa = Array2::zeros((4, 4096));
    for i in 0..4096 {
        let v = (i as f64 * 0.07).sin() * 0.3;
        foa[[0, i]] = v;
        foa[[3, i]] = v;
    }
    write_wav(&env.p("foa.wav"), &foa, 16_000).unwrap();
    write_wav(&env.p("stereo.wav"), &Array2::zeros((2, 4096)), 16_000).unwrap();

    let out = env.s("hoa.wav");
    env.ok(&["baseline", "--input", &env.s("foa.wav"), "--out", &out]);
    let hoa = ambi_upscale::io::read_ambisonics(&env.p("hoa.wav")).unwrap();
    assert_eq!((hoa.num_channels(), hoa.len()), (16, 4096));

    assert_eq!(env.code(&["baseline", "--input", &env.s("stereo.wav"), "--out", &out]), 2);

    let stem = env.s("plot/energy");
    std::fs::create_dir_all(env.p("plot")).unwrap();
    env.ok(&["plot-energy", "--input", &out, "--out", &stem]);
    assert!(env.p("plot/energy.png").exists() && env.p("plot/energy.tsv").exists());
}
