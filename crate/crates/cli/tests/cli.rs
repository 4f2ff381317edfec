//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn vidtok() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vidtok"))
}

#[test]
fn help_exits_zero() {
    let out = vidtok().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["decompose", "train-vqvae", "predict", "interpolate", "eval", "gen-data"] {
        assert!(text.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = vidtok().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_input_fails_with_diagnostic() {
    let out = vidtok()
        .args(["decompose", "--input", "/nonexistent.vclp", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_data_decompose_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // Small dataset.
    let out = vidtok()
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--height",
            "16",
            "--width",
            "16",
            "--frames",
            "4",
            "--train",
            "2",
            "--val",
            "0",
            "--test",
            "1",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    // Decompose one rendered clip.
    let clip = data.join("train_00000.vclp");
    let comps = dir.path().join("components");
    let out = vidtok()
        .args([
            "decompose",
            "--input",
            clip.to_str().unwrap(),
            "--out",
            comps.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scene.vclp", "object.vclp", "motion.vclp", "mask.vclp"] {
        assert!(comps.join(f).exists(), "missing {f}");
    }

    // Evaluate a "prediction" (the clip against itself) with the eval command.
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    std::fs::copy(&clip, truth.join("clip0.vclp")).unwrap();
    std::fs::copy(&clip, pred.join("clip0__trial0.vclp")).unwrap();
    let out = vidtok()
        .args([
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--truth",
            truth.to_str().unwrap(),
            "--trials",
            "10",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean_psnr=99.0"), "identical clips should hit the PSNR cap:\n{text}");
    assert!(text.contains("mean_ssim=1.0"), "identical clips should have SSIM 1:\n{text}");
}

#[test]
fn train_and_task_commands_round_trip_small() {
    // Minimal two-stage run exercising train-vqvae, train-transformer,
    // predict, predict-long, interpolate, manipulate and
    // visualize-components on a tiny model.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = vidtok()
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--height",
            "16",
            "--width",
            "16",
            "--frames",
            "4",
            "--train",
            "4",
            "--val",
            "0",
            "--test",
            "1",
            "--seed",
            "11",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let config_path = dir.path().join("tiny.toml");
    std::fs::write(
        &config_path,
        r#"
[vqvae]
t = 4
h = 16
w = 16
c = 3
f_s = 4
f_o = 4
f_m = 4
d = 8
n = 32
n_t = 2
base_channels = 8
residual_depth = 1
shared_codebook = true
ema_decay = 0.99
smoothing_eps = 1e-5
dead_entry_patience = 0
c_lb = 0.1
c_ub = 0.9

[vqvae_train]
learning_rate = 1e-3
training_steps = 4
batch_size = 2
preproc_handoff_step = 2
disc_start_step = 4
scheduler = "constant"

[transformer]
so_blocks = 1
m_blocks = 1
attention_heads = 4
embedding_dim = 16
hidden_dim = 32
intermediate_dim = 48
dropout = 0.0

[transformer_train]
learning_rate = 1e-3
training_steps = 3
batch_size = 2
k = 2
c = 1
scheduler = "constant"

[generation]
s = 4
temperature = 1.0
"#,
    )
    .unwrap();

    let vq = dir.path().join("vqvae.ckpt");
    let out = vidtok()
        .args([
            "train-vqvae",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            vq.to_str().unwrap(),
            "--log",
            dir.path().join("vq.log").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(vq.exists());
    let log = std::fs::read_to_string(dir.path().join("vq.log")).unwrap();
    assert_eq!(log.lines().count(), 4, "one metrics record per step");
    assert!(log.lines().next().unwrap().starts_with("step=0 l2="));

    let tr = dir.path().join("transformer.ckpt");
    let out = vidtok()
        .args([
            "train-transformer",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--vqvae",
            vq.to_str().unwrap(),
            "--out",
            tr.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Conditioning clip: first 2 frames of a test clip.
    let test_clip = data.join("test_00000.vclp");
    let prev_path = dir.path().join("prev.vclp");
    {
        let clip = vidtok_load(&test_clip);
        let prev = clip.slice_frames(0, 2).unwrap();
        vidtok::clipio::save_clip(&prev, &prev_path).unwrap();
    }
    let pred_path = dir.path().join("pred.vclp");
    let out = vidtok()
        .args([
            "predict",
            "--vqvae",
            vq.to_str().unwrap(),
            "--transformer",
            tr.to_str().unwrap(),
            "--input",
            prev_path.to_str().unwrap(),
            "--out",
            pred_path.to_str().unwrap(),
            "--iterations",
            "4",
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(vidtok_load(&pred_path).t(), 2);

    let long_path = dir.path().join("long.vclp");
    let out = vidtok()
        .args([
            "predict-long",
            "--vqvae",
            vq.to_str().unwrap(),
            "--transformer",
            tr.to_str().unwrap(),
            "--input",
            prev_path.to_str().unwrap(),
            "--clips",
            "2",
            "--out",
            long_path.to_str().unwrap(),
            "--iterations",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(vidtok_load(&long_path).t(), 2 + 2 * 2);

    let interp_path = dir.path().join("interp.vclp");
    let out = vidtok()
        .args([
            "interpolate",
            "--vqvae",
            vq.to_str().unwrap(),
            "--transformer",
            tr.to_str().unwrap(),
            "--input",
            prev_path.to_str().unwrap(),
            "--positions",
            "0,3",
            "--out",
            interp_path.to_str().unwrap(),
            "--iterations",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(vidtok_load(&interp_path).t(), 4);

    let manip_path = dir.path().join("manip.vclp");
    let out = vidtok()
        .args([
            "manipulate",
            "--vqvae",
            vq.to_str().unwrap(),
            "--object-from",
            test_clip.to_str().unwrap(),
            "--scene-from",
            data.join("train_00000.vclp").to_str().unwrap(),
            "--out",
            manip_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let viz_path = dir.path().join("viz.vclp");
    let out = vidtok()
        .args([
            "visualize-components",
            "--vqvae",
            vq.to_str().unwrap(),
            "--input",
            test_clip.to_str().unwrap(),
            "--which",
            "object+motion",
            "--out",
            viz_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Unknown selector is a usage failure.
    let out = vidtok()
        .args([
            "visualize-components",
            "--vqvae",
            vq.to_str().unwrap(),
            "--input",
            test_clip.to_str().unwrap(),
            "--which",
            "nonsense",
            "--out",
            viz_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn vidtok_load(path: &Path) -> vidtok::clip::VideoClip {
    vidtok::clipio::load_clip(path).unwrap()
}
