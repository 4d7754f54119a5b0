use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use ddip_core::autodiff::audit;
use ddip_core::denoiser::{build_denoiser, load_checkpoint, save_checkpoint, DenoiserConfig};
use ddip_core::harness::{
    compare_methods, prepare_inputs, reconstruct_measurements, run_experiment, write_png16, write_report_csv,
    ExperimentConfig, MetricsRow, SweepConfig, REPORT_HEADER,
};
use ddip_core::metrics::{psnr, ssim};
use ddip_core::operators::io::{read_measurement, read_volume, write_measurement, write_volume, Measurement};
use ddip_core::phantoms::{ellipse_image, EllipseSpec};
use ddip_core::schedule::{dsm_train, DsmSettings, NoiseSchedule};
use ddip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ddip", version, about = "Diffusion-prior volume reconstruction with adapter fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured OOD volume, or ellipse training samples.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Emit this many ellipse phantoms instead of the OOD volume.
        #[arg(long)]
        ellipses: Option<usize>,
    },
    /// Train a denoiser on ellipse phantoms with denoising score matching.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Simulate measurements of the configured volume (or of `--volume`).
    Measure {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: Option<PathBuf>,
    },
    /// Reconstruct with the configured method. With `--measurement`, only the
    /// reconstruction is written; otherwise the full experiment runs.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-slice PSNR and SSIM of a reconstruction against a reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "recon")]
        label: String,
    },
    /// Run every variant of a sweep file and print the ranking.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference audit of the autodiff op catalog.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds.phantom = s;
        cfg.seeds.measurement = s;
        cfg.seeds.method = s;
    }
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--out is required".into()))
}

fn write_slices(dir: &Path, volume: &[Vec<f64>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("volume.bin"), volume)?;
    for (i, s) in volume.iter().enumerate() {
        write_png16(&dir.join(format!("slice_{i:03}.png")), s)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, ellipses } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let volume = match ellipses {
                Some(n) => {
                    use rand::SeedableRng;
                    let spec = EllipseSpec {
                        image_size: cfg.phantom.image_size,
                        ..EllipseSpec::default()
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.phantom);
                    (0..n).map(|_| ellipse_image(&spec, &mut rng)).collect()
                }
                None => prepare_inputs(&cfg)?.truth,
            };
            write_slices(out, &volume)?;
            println!("wrote {} slices to {}", volume.len(), out.display());
        }
        Command::Train {
            common,
            steps,
            batch,
            lr,
            channels,
            image_size,
        } => {
            let out = require_out(&common)?;
            let seed = common.seed.unwrap_or(0);
            let config = DenoiserConfig {
                image_size,
                base_channels: channels,
                ..DenoiserConfig::default()
            };
            let mut net = build_denoiser(&config, seed)?;
            let spec = EllipseSpec {
                image_size,
                ..EllipseSpec::default()
            };
            let mut sampler = |rng: &mut ChaCha8Rng| ellipse_image(&spec, rng);
            let settings = DsmSettings { steps, lr, batch, seed };
            let trace = dsm_train(&mut net, &mut sampler, &NoiseSchedule::standard(), settings)?;
            save_checkpoint(out, &net)?;
            trace.write_csv(&out.with_extension("loss.csv"))?;
            let tail = trace.moving_average(100);
            println!(
                "trained {} parameters for {steps} steps; final smoothed loss {:.4}; wrote {}",
                net.num_base_params(),
                tail.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Measure { common, volume } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let spec = cfg.operator_spec();
            let slices = match volume {
                Some(p) => {
                    let truth = read_volume(&p)?;
                    let op = spec.build()?;
                    ddip_core::operators::simulate_volume(&op, &truth, cfg.seeds.measurement)?
                }
                None => prepare_inputs(&cfg)?.measurements,
            };
            let m = Measurement {
                spec,
                seed: cfg.seeds.measurement,
                slices,
            };
            write_measurement(out, &m)?;
            println!("wrote {} measurements to {}", m.slices.len(), out.display());
        }
        Command::Reconstruct {
            common,
            measurement,
            method,
            checkpoint,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.method = toml::Value::String(m)
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if common.out.is_some() {
                cfg.out_dir = common.out.clone();
            }
            match measurement {
                Some(path) => {
                    let m = read_measurement(&path)?;
                    let net = match (&cfg.checkpoint, cfg.method.needs_prior()) {
                        (Some(p), true) => Some(load_checkpoint(p)?),
                        (None, true) => return Err(Error::InvalidConfig("diffusion methods need --checkpoint".into())),
                        _ => None,
                    };
                    let (volume, _) = reconstruct_measurements(&cfg, net.as_ref(), &m.spec, &m.slices)?;
                    let out = require_out(&common)?;
                    write_slices(out, &volume)?;
                    println!("reconstructed {} slices into {}", volume.len(), out.display());
                }
                None => {
                    let report = run_experiment(&cfg)?;
                    println!("{REPORT_HEADER}");
                    for r in &report.rows {
                        println!(
                            "{},{},{},{:.4},{:.4},{},{:.2}",
                            r.volume, r.slice, r.method, r.psnr, r.ssim, r.adapt_steps, r.seconds
                        );
                    }
                    println!("mean psnr {:.3} dB, mean ssim {:.4}", report.mean_psnr, report.mean_ssim);
                }
            }
        }
        Command::Eval {
            common,
            recon,
            truth,
            label,
        } => {
            let (x, t) = (read_volume(&recon)?, read_volume(&truth)?);
            if x.len() != t.len() {
                return Err(Error::InvalidArgument("volumes have different slice counts".into()));
            }
            let rows = x
                .iter()
                .zip(&t)
                .enumerate()
                .map(|(i, (a, b))| {
                    Ok(MetricsRow {
                        volume: truth.display().to_string(),
                        slice: i,
                        method: label.clone(),
                        psnr: psnr(a, b, 1.0)?,
                        ssim: ssim(a, b)?,
                        adapt_steps: 0,
                        seconds: 0.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match &common.out {
                Some(p) => write_report_csv(p, &rows)?,
                None => {
                    println!("{REPORT_HEADER}");
                    for r in &rows {
                        println!("{},{},{},{:.4},{:.4},0,0", r.volume, r.slice, r.method, r.psnr, r.ssim);
                    }
                }
            }
        }
        Command::Sweep { common, checkpoint } => {
            let path = common
                .config
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("sweep needs --config".into()))?;
            let mut configs = SweepConfig::from_toml(&std::fs::read_to_string(path)?)?.expand()?;
            for c in configs.iter_mut() {
                if let Some(s) = common.seed {
                    c.seeds.method = s;
                }
                if checkpoint.is_some() {
                    c.checkpoint = checkpoint.clone();
                }
            }
            let net = match configs.iter().find(|c| c.method.needs_prior()) {
                Some(c) => {
                    let p = c
                        .checkpoint
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig("diffusion methods need a checkpoint".into()))?;
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            let rows = compare_methods(&configs, net.as_ref())?;
            let mut text = String::from("label,method,mean_psnr,mean_ssim,adapt_steps,seconds\n");
            for r in &rows {
                text += &format!(
                    "{},{},{:.4},{:.4},{},{:.2}\n",
                    r.label, r.method, r.mean_psnr, r.mean_ssim, r.adapt_steps, r.seconds
                );
            }
            match &common.out {
                Some(p) => std::fs::write(p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Gradcheck { common, eps } => {
            let entries = audit(common.seed.unwrap_or(0), eps)?;
            let mut worst: f64 = 0.0;
            for e in &entries {
                worst = worst.max(e.report.max_rel_error);
                println!(
                    "{:<16} checked {:>5}  excluded {:>3}  max rel err {:.2e}",
                    e.name,
                    e.report.checked,
                    e.report.excluded.len(),
                    e.report.max_rel_error
                );
            }
            if worst >= 1e-3 {
                return Err(Error::Solver(format!("gradient audit failed: max rel err {worst:.2e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
