mod common;

use std::process::Command;

use ddip_core::denoiser::save_checkpoint;
use ddip_core::harness::{
    compare_methods, run_experiment, run_experiment_with, ExperimentConfig, MethodKind, ScheduleConfig, SweepConfig,
    REPORT_HEADER,
};
use ddip_core::operators::OperatorSpec;
use ddip_core::phantoms::OodVolumeSpec;
use ddip_core::Error;

fn small(method: MethodKind, slices: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        phantom: OodVolumeSpec {
            image_size: common::SIZE,
            slices,
            ..OodVolumeSpec::default()
        },
        schedule: ScheduleConfig {
            nfe: 6,
            ..ScheduleConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.adapt.k = 2.min(slices);
    cfg.adapt.inner_steps = 2;
    cfg.adapt.zeta = 0;
    cfg.tv.iters = 20;
    cfg
}

#[test]
fn dds_recovers_noiseless_identity_measurements() {
    let net = common::tiny_net(1);
    let cfg = ExperimentConfig {
        operator: Some(OperatorSpec::identity(common::SIZE, 0.0)),
        schedule: ScheduleConfig {
            nfe: 10,
            ..ScheduleConfig::default()
        },
        ..small(MethodKind::Dds, 3)
    };
    let report = run_experiment_with(&cfg, Some(&net)).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr > 40.0), "{:?}", report.rows);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let net = common::tiny_net(1);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csv = Vec::new();
    for d in &dirs {
        let cfg = ExperimentConfig {
            out_dir: Some(d.path().to_path_buf()),
            ..small(MethodKind::D3ipBase, 3)
        };
        run_experiment_with(&cfg, Some(&net)).unwrap();
        csv.push(std::fs::read(d.path().join("report.csv")).unwrap());
        let manifest = std::fs::read_to_string(d.path().join("manifest.json")).unwrap();
        for name in ["report.csv", "reconstruction.bin", "trace.csv", "adapters_000.lora"] {
            assert!(manifest.contains(name) && d.path().join(name).exists(), "{name}");
        }
        let png = std::fs::read(d.path().join("slice_002.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        // bit depth byte of the IHDR chunk
        assert_eq!(png[24], 16);
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv.pop().unwrap()).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn per_slice_adaptation_costs_n_times_shared_adaptation() {
    let net = common::tiny_net(1);
    let n = 8;
    let shared = run_experiment_with(&small(MethodKind::D3ipBase, n), Some(&net)).unwrap();
    let per_slice = run_experiment_with(&small(MethodKind::Ddip, n), Some(&net)).unwrap();
    let ratio = per_slice.counters.adapt_steps as f64 / shared.counters.adapt_steps as f64;
    assert!((0.8 * n as f64..=1.2 * n as f64).contains(&ratio), "ratio {ratio}");
    assert_eq!(per_slice.reconstruction.unwrap().adapters.len(), n);
    assert_eq!(shared.reconstruction.unwrap().adapters.len(), 1);
}

#[test]
fn comparisons_rank_rows_and_check_shared_inputs() {
    let net = common::tiny_net(1);
    let one = compare_methods(&[small(MethodKind::AdmmTv, 2)], None).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].method, "admm_tv");

    let mut other = small(MethodKind::Dds, 2);
    other.seeds.measurement = 9;
    let err = compare_methods(&[small(MethodKind::AdmmTv, 2), other], Some(&net)).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");

    let sweep = SweepConfig::from_toml(&format!(
        "[base]\nmethod = \"d3ip_base\"\n{}\n{}",
        "[base.phantom]\nimage_size = 16\nslices = 2\n[base.schedule]\nnfe = 4\n[base.adapt]\nk = 2\ninner_steps = 1\nzeta = 0",
        "[[variant]]\nname = \"r4\"\nadapt = { lora_rank = 4 }\n[[variant]]\nname = \"r8\"\nadapt = { lora_rank = 8 }\n[[variant]]\nname = \"r16\"\nadapt = { lora_rank = 16 }\n",
    ))
    .unwrap();
    let rows = compare_methods(&sweep.expand().unwrap(), Some(&net)).unwrap();
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    assert_eq!(labels, ["r16", "r4", "r8"]);
    assert!(rows.windows(2).all(|w| w[0].mean_psnr >= w[1].mean_psnr));
}

#[test]
fn failures_name_their_stage() {
    let cfg = ExperimentConfig {
        checkpoint: Some("/nonexistent/net.ckpt".into()),
        ..small(MethodKind::Dds, 2)
    };
    let msg = run_experiment(&cfg).unwrap_err().to_string();
    assert!(msg.contains("checkpoint"), "{msg}");
    let mut bad = small(MethodKind::Dds, 2);
    bad.phantom.correlation = 2.0;
    let msg = run_experiment_with(&bad, Some(&common::tiny_net(1))).unwrap_err().to_string();
    assert!(msg.contains("phantom"), "{msg}");
    let mut mismatch = small(MethodKind::Dds, 2);
    mismatch.operator = Some(OperatorSpec::identity(8, 0.0));
    assert!(run_experiment_with(&mismatch, None).unwrap_err().to_string().contains("config"));
}

fn ddip(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ddip")).args(args).output().unwrap()
}

#[test]
fn command_line_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut cfg = small(MethodKind::AdmmTv, 2);
    cfg.checkpoint = Some(dir.path().join("net.ckpt"));
    save_checkpoint(&dir.path().join("net.ckpt"), &common::tiny_net(1)).unwrap();
    std::fs::write(p("exp.toml"), cfg.to_toml().unwrap()).unwrap();

    let ok = |out: std::process::Output| {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(ddip(&["phantom", "--config", &p("exp.toml"), "--out", &p("truth")]));
    assert!(dir.path().join("truth/slice_001.png").exists());
    ok(ddip(&["measure", "--config", &p("exp.toml"), "--out", &p("y.bin")]));
    ok(ddip(&["reconstruct", "--config", &p("exp.toml"), "--measurement", &p("y.bin"), "--out", &p("rec")]));
    let eval = ok(ddip(&[
        "eval",
        "--recon",
        &p("rec/volume.bin"),
        "--truth",
        &p("truth/volume.bin"),
        "--label",
        "tv",
    ]));
    assert!(eval.starts_with(REPORT_HEADER));
    assert_eq!(eval.lines().count(), 3);
    let run = ok(ddip(&["reconstruct", "--config", &p("exp.toml"), "--method", "dds"]));
    assert!(run.contains("mean psnr"));

    let failed = ddip(&["reconstruct", "--config", &p("exp.toml"), "--method", "dds", "--checkpoint", &p("none")]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("checkpoint"));
    assert!(!ddip(&["reconstruct", "--method", "nonsense"]).status.success());
}

#[test]
fn gradcheck_command_passes() {
    let out = ddip(&["gradcheck", "--seed", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("conv2d") && text.contains("random_net_2"));
}
