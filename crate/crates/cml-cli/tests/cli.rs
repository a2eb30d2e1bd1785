//! Drives the `cml` binary through every subcommand on a small config.

use std::path::Path;
use std::process::Command;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = r#"
name = "cli-smoke"
seeds = [5]
strategy = "fft"

[benchmark]
task = "token-tag"
n_stages = 2
n_concept_classes = 4
n_tags = 5
seq_len = [4, 7]
dev_per_lang = 8
test_per_lang = 8

[benchmark.langset]
n_families = 2
langs_per_family = 2
feature_dim = 16
p_in = 0.05
p_out = 0.35
concept_vocab = 24
anchor_fraction = 0.2
base_resource = 48
resource_ratios = []

[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ffn = 24
max_seq_len = 12
b_dim = 4

[hyper]
batch_size = 8
inception_lr = 0.003
inception_epochs = 2
continuation_lr = 0.003
continuation_epochs = 2
adapter_joint_epochs = 1
adapter_lang_epochs = 1
laft_div_factor = 10.0
weight_decay = 0.00001
mlm_lr = 0.003
mask_rate = 0.15
mode = "adamw"

[hyper.sft]
ft_epochs = 1
st_epochs = 2
rho = 0.05
freeze_layer_norm = true
strict_stale_matrices = false
"#;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn cml(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cml"))
        .args(args)
        .env("CML_THREADS", "2")
        .output()
        .expect("binary runs")
}

#[test]
fn full_cli_flow() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let config = config.to_str().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();

    let gen = cml(&["gen-data", "--config", config, "--out", out_str]);
    assert!(gen.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&gen.stderr));
    assert!(out.join("cli-smoke/data/seed5/benchmark.json").exists());
    assert!(out.join("cli-smoke/data/seed5/distances.csv").exists());

    let run = cml(&["run", "--config", config, "--out", out_str, "--format", "all"]);
    assert!(run.status.success(), "run failed: {}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("AvgPercentLoss"), "summary missing: {stdout}");
    let heatmap = out.join("cli-smoke/heatmap_fft_seed5.csv");
    assert!(heatmap.exists());
    assert!(out.join("cli-smoke/heatmap_fft_avg.svg").exists());
    assert!(out.join("cli-smoke/report_fft.json").exists());
    assert!(out.join("cli-smoke/manifest.json").exists());

    let report = cml(&["report", "--out", out.join("cli-smoke").to_str().unwrap(), "--strategy", "fft"]);
    assert!(report.status.success(), "report failed: {}", String::from_utf8_lossy(&report.stderr));
    assert!(String::from_utf8_lossy(&report.stdout).contains("avg_percent_loss"));

    let svg_out = dir.path().join("rendered");
    let heat = cml(&[
        "heatmap",
        "--input",
        heatmap.to_str().unwrap(),
        "--out",
        svg_out.to_str().unwrap(),
        "--format",
        "svg",
    ]);
    assert!(heat.status.success(), "heatmap failed: {}", String::from_utf8_lossy(&heat.stderr));
    assert!(svg_out.join("heatmap_fft_seed5.svg").exists());

    let traj = cml(&[
        "trajectory",
        "--config",
        config,
        "--out",
        out_str,
        "--order",
        "l2h",
        "--strategy",
        "laft",
    ]);
    assert!(traj.status.success(), "trajectory failed: {}", String::from_utf8_lossy(&traj.stderr));
    assert!(out.join("cli-smoke/trajectory_laft_l2h.json").exists());

    // strategy override with a laft-uriel run exercises the uriel path
    let uriel = cml(&[
        "run",
        "--config",
        config,
        "--out",
        out_str,
        "--strategy",
        "laft-uriel",
        "--format",
        "csv",
    ]);
    assert!(uriel.status.success(), "laft-uriel run failed: {}", String::from_utf8_lossy(&uriel.stderr));
    assert!(out.join("cli-smoke/heatmap_laft-uriel_avg.csv").exists());
}

#[test]
fn unknown_strategy_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = cml(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--strategy",
        "magic",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown strategy"));
}
