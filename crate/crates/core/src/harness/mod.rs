//! Experiment configuration, the phantom → measure → reconstruct → evaluate
//! pipeline, reports and method comparisons.

mod artifacts;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    d3ip_meta_reconstruct, d3ip_reconstruct, ddip_reconstruct, dip_baseline, reconstruct_without_adaptation,
    AdaptConfig, Counters, DipConfig, Reconstruction, SamplingMode,
};
use crate::approximators::{admm_tv_baseline, AdmmConfig, ApproximatorConfig, Method, SolverContext, TvConfig};
use crate::denoiser::{load_checkpoint, DenoiserParams};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::operators::{mri, simulate_volume, OperatorKind, OperatorSpec};
use crate::phantoms::{sample_ood_volume, OodVolumeSpec};
use crate::schedule::{make_vp_schedule, NoiseSchedule};

pub use artifacts::{write_png16, write_report_csv, REPORT_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ct3d,
    Mri3d,
    Csmri2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ddnm,
    Dps,
    Dds,
    Mbir,
    AdmmTv,
    Dip,
    Ddip,
    D3ipBase,
    D3ipMbir,
    D3ipMeta,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Ddnm => "ddnm",
            MethodKind::Dps => "dps",
            MethodKind::Dds => "dds",
            MethodKind::Mbir => "mbir",
            MethodKind::AdmmTv => "admm_tv",
            MethodKind::Dip => "dip",
            MethodKind::Ddip => "ddip",
            MethodKind::D3ipBase => "d3ip_base",
            MethodKind::D3ipMbir => "d3ip_mbir",
            MethodKind::D3ipMeta => "d3ip_meta",
        }
    }

    /// Whether the method samples from the pretrained diffusion prior.
    pub fn needs_prior(self) -> bool {
        !matches!(self, MethodKind::AdmmTv | MethodKind::Dip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub phantom: u64,
    pub measurement: u64,
    /// Seeds adapters, initialization noise and sampling noise.
    pub method: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            phantom: 0,
            measurement: 1,
            method: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub nfe: usize,
    pub eta: f64,
    pub t_start: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            nfe: 50,
            eta: 0.85,
            t_start: 980,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_vp_schedule(self.timesteps, self.beta_min, self.beta_max, self.nfe, self.eta, self.t_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports; defaults to the method name.
    pub name: Option<String>,
    pub task: Task,
    pub method: MethodKind,
    pub seeds: Seeds,
    pub phantom: OodVolumeSpec,
    /// Forward model; `None` uses the task default.
    pub operator: Option<OperatorSpec>,
    pub schedule: ScheduleConfig,
    pub adapt: AdaptConfig,
    pub tv: TvConfig,
    pub dip: DipConfig,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Single-threaded and wall-clock-free reports, for byte-identical reruns.
    pub reference_mode: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            task: Task::Ct3d,
            method: MethodKind::D3ipBase,
            seeds: Seeds::default(),
            phantom: OodVolumeSpec::default(),
            operator: None,
            schedule: ScheduleConfig::default(),
            adapt: AdaptConfig::default(),
            tv: TvConfig::default(),
            dip: DipConfig::default(),
            checkpoint: None,
            out_dir: None,
            reference_mode: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// Forward model, falling back to the task default: 15-view CT with
    /// σ_y = 0.01 for `ct3d`, 4× variable-density single-coil MRI otherwise.
    pub fn operator_spec(&self) -> OperatorSpec {
        if let Some(op) = &self.operator {
            return op.clone();
        }
        let size = self.phantom.image_size;
        match self.task {
            Task::Ct3d => OperatorSpec::sparse_view_ct(size, 15, 0.01),
            Task::Mri3d | Task::Csmri2d => OperatorSpec {
                image_size: size,
                kind: OperatorKind::MriSingle {
                    mask: mri::variable_density_mask(size, 4.0, 0.08, self.seeds.measurement),
                },
                sigma_y: 0.01,
            },
        }
    }

    /// Adaptation settings with the approximator implied by the method.
    /// Methods named after an approximator use it; the TV-coupled variants
    /// also switch to neighbor sampling. MRI tasks use the MRI ADMM weights
    /// unless the configuration already changed them.
    pub fn effective_adapt(&self) -> AdaptConfig {
        let mut cfg = self.adapt.clone();
        cfg.seed = self.seeds.method;
        let method = match self.method {
            MethodKind::Ddnm => Some(Method::Ddnm),
            MethodKind::Dps => Some(Method::Dps),
            MethodKind::Dds => Some(Method::Dds),
            MethodKind::Mbir | MethodKind::D3ipMbir => Some(Method::Mbir),
            _ => None,
        };
        if let Some(m) = method {
            if cfg.approximator.method != m {
                let admm = cfg.approximator.admm;
                cfg.approximator = ApproximatorConfig {
                    admm,
                    ..ApproximatorConfig::for_method(m)
                };
            }
        }
        if self.method == MethodKind::D3ipMbir {
            cfg.sampling_mode = SamplingMode::Neighbor;
        }
        if self.task != Task::Ct3d && cfg.approximator.admm == AdmmConfig::ct() {
            cfg.approximator.admm = AdmmConfig::mri();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let op = self.operator_spec();
        op.validate()?;
        if op.image_size != self.phantom.image_size {
            return Err(Error::config("operator and phantom image sizes differ"));
        }
        let task_matches = match (&self.task, &op.kind) {
            (Task::Ct3d, OperatorKind::CtParallel { .. }) => true,
            (Task::Mri3d | Task::Csmri2d, OperatorKind::MriSingle { .. } | OperatorKind::MriMulticoil { .. }) => true,
            (_, OperatorKind::Identity | OperatorKind::Dense { .. }) => true,
            _ => false,
        };
        if !task_matches {
            return Err(Error::config(format!("operator `{}` does not fit task {:?}", op.short_name(), self.task)));
        }
        self.schedule.build()?;
        if self.method.needs_prior() {
            self.effective_adapt().validate()?;
        }
        Ok(())
    }
}

/// One metrics row per reconstructed slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub volume: String,
    pub slice: usize,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub adapt_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub label: String,
    pub rows: Vec<MetricsRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub counters: Counters,
    /// Wall-clock seconds per stage; zero in reference mode.
    pub phase_seconds: Vec<(String, f64)>,
    pub config: ExperimentConfig,
    /// SHA-256 over the ground truth, the measurements and the operator hash.
    pub input_hash: String,
    pub volume: Vec<Vec<f64>>,
    pub reconstruction: Option<Reconstruction>,
}

/// Ground truth, operator and measurements for a configuration.
pub struct Inputs {
    pub truth: Vec<Vec<f64>>,
    pub spec: OperatorSpec,
    pub measurements: Vec<Vec<f64>>,
}

pub fn prepare_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let truth = sample_ood_volume(&cfg.phantom, cfg.seeds.phantom).map_err(|e| e.in_stage("phantom"))?;
    let spec = cfg.operator_spec();
    let op = spec.build().map_err(|e| e.in_stage("measure"))?;
    let measurements = simulate_volume(&op, &truth, cfg.seeds.measurement).map_err(|e| e.in_stage("measure"))?;
    Ok(Inputs {
        truth,
        spec,
        measurements,
    })
}

fn input_hash(inputs: &Inputs) -> String {
    let mut h = Sha256::new();
    for v in inputs.truth.iter().chain(&inputs.measurements).flatten() {
        h.update(v.to_le_bytes());
    }
    h.update(inputs.spec.hash().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs a configuration end to end, loading the checkpoint named in it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let net = if cfg.method.needs_prior() {
        let path = cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("diffusion methods need a checkpoint").in_stage("checkpoint"))?;
        Some(load_checkpoint(path).map_err(|e| e.in_stage("checkpoint"))?)
    } else {
        None
    };
    run_experiment_with(cfg, net.as_ref())
}

/// Runs a configuration with an already loaded prior.
pub fn run_experiment_with(cfg: &ExperimentConfig, net: Option<&DenoiserParams>) -> Result<Report> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let clock = |start: Instant| if cfg.reference_mode { 0.0 } else { start.elapsed().as_secs_f64() };
    let mut phases = Vec::new();

    let start = Instant::now();
    let inputs = prepare_inputs(cfg)?;
    phases.push(("inputs".to_string(), clock(start)));

    let start = Instant::now();
    let (volume, reconstruction) = reconstruct(cfg, net, &inputs).map_err(|e| e.in_stage("reconstruct"))?;
    let seconds = clock(start);
    phases.push(("reconstruct".to_string(), seconds));

    let start = Instant::now();
    let counters = reconstruction.as_ref().map(|r| r.counters).unwrap_or_default();
    let label = cfg.label();
    let volume_name = format!("{:?}-{}", cfg.phantom.kind, cfg.seeds.phantom).to_lowercase();
    let rows = volume
        .iter()
        .zip(&inputs.truth)
        .enumerate()
        .map(|(i, (x, t))| {
            Ok(MetricsRow {
                volume: volume_name.clone(),
                slice: i,
                method: label.clone(),
                psnr: psnr(x, t, 1.0)?,
                ssim: ssim(x, t)?,
                adapt_steps: counters.adapt_steps,
                seconds,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("evaluate"))?;
    phases.push(("evaluate".to_string(), clock(start)));

    let n = rows.len() as f64;
    let report = Report {
        label,
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        counters,
        phase_seconds: phases,
        config: cfg.clone(),
        input_hash: input_hash(&inputs),
        volume,
        reconstruction,
    };
    if let Some(dir) = &cfg.out_dir {
        artifacts::write_all(dir, &report).map_err(|e| e.in_stage("write"))?;
    }
    Ok(report)
}

type Outcome = (Vec<Vec<f64>>, Option<Reconstruction>);

fn reconstruct(cfg: &ExperimentConfig, net: Option<&DenoiserParams>, inputs: &Inputs) -> Result<Outcome> {
    reconstruct_measurements(cfg, net, &inputs.spec, &inputs.measurements)
}

/// Reconstructs stored measurements with the method of `cfg`; the operator
/// comes from the measurements rather than the configuration.
pub fn reconstruct_measurements(
    cfg: &ExperimentConfig,
    net: Option<&DenoiserParams>,
    spec: &OperatorSpec,
    ys: &[Vec<f64>],
) -> Result<Outcome> {
    let op = spec.build()?;
    match cfg.method {
        MethodKind::AdmmTv => {
            let volume = ys
                .iter()
                .map(|y| admm_tv_baseline(y, &op, &cfg.tv).map(|r| r.x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
                .collect::<Result<_>>()?;
            Ok((volume, None))
        }
        MethodKind::Dip => {
            let volume = ys
                .iter()
                .enumerate()
                .map(|(i, y)| {
                    let dip = DipConfig {
                        seed: cfg.seeds.method.wrapping_add(i as u64),
                        ..cfg.dip.clone()
                    };
                    dip_baseline(y, &op, &dip).map(|r| r.x)
                })
                .collect::<Result<_>>()?;
            Ok((volume, None))
        }
        method => {
            let net = net.ok_or_else(|| Error::config("diffusion methods need a loaded prior"))?;
            let schedule = cfg.schedule.build()?;
            let adapt = cfg.effective_adapt();
            let ctx = SolverContext {
                net,
                schedule: &schedule,
                op: &op,
                config: &adapt.approximator,
            };
            let keys: Vec<u64> = (0..ys.len() as u64).collect();
            let out = match method {
                MethodKind::Ddip => ddip_reconstruct(&ctx, ys, &keys, &adapt)?,
                MethodKind::D3ipBase | MethodKind::D3ipMbir => d3ip_reconstruct(&ctx, ys, &keys, &adapt)?,
                MethodKind::D3ipMeta => d3ip_meta_reconstruct(&ctx, ys, &keys, &adapt)?,
                _ => reconstruct_without_adaptation(&ctx, ys, &keys, &adapt)?,
            };
            Ok((out.volume.clone(), Some(out)))
        }
    }
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub method: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub adapt_steps: usize,
    pub seconds: f64,
}

/// Runs every configuration on the same inputs and ranks them by mean
/// PSNR (ties broken by label). All configurations must share phantom,
/// operator and seeds for phantom and measurement.
pub fn compare_methods(configs: &[ExperimentConfig], net: Option<&DenoiserParams>) -> Result<Vec<ComparisonRow>> {
    let Some(first) = configs.first() else {
        return Err(Error::invalid("compare_methods needs at least one configuration"));
    };
    for c in &configs[1..] {
        if c.seeds.phantom != first.seeds.phantom
            || c.seeds.measurement != first.seeds.measurement
            || c.phantom != first.phantom
            || c.operator_spec() != first.operator_spec()
        {
            return Err(Error::config(format!(
                "`{}` does not share phantom and measurement settings with `{}`",
                c.label(),
                first.label()
            )));
        }
    }
    let mut rows = configs
        .iter()
        .map(|c| {
            let r = run_experiment_with(c, net)?;
            Ok(ComparisonRow {
                label: r.label.clone(),
                method: c.method.name().to_string(),
                mean_psnr: r.mean_psnr,
                mean_ssim: r.mean_ssim,
                adapt_steps: r.counters.adapt_steps,
                seconds: r.phase_seconds.iter().map(|p| p.1).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.mean_psnr.total_cmp(&a.mean_psnr).then_with(|| a.label.cmp(&b.label)));
    Ok(rows)
}

/// A base configuration plus named overrides, each merged key by key.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: toml::Table,
    #[serde(rename = "variant")]
    pub variants: Vec<toml::Table>,
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Concrete experiment configurations, one per variant.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        if self.variants.is_empty() {
            return Err(Error::config("sweep needs at least one [[variant]]"));
        }
        self.variants
            .iter()
            .map(|v| {
                let mut table = self.base.clone();
                merge(&mut table, v);
                toml::Value::Table(table)
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::config(e.to_string()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("methd = \"dds\"").is_err());
        assert!(ExperimentConfig::from_toml("method = \"unknown\"").is_err());
    }

    #[test]
    fn sweep_variants_override_nested_keys() {
        let sweep = SweepConfig::from_toml(
            "[base]\nmethod = \"d3ip_base\"\n[base.adapt]\nk = 2\n[[variant]]\nname = \"k1\"\nadapt = { k = 1 }\n[[variant]]\nname = \"k2\"\n",
        )
        .unwrap();
        let cfgs = sweep.expand().unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0].adapt.k, 1);
        assert_eq!(cfgs[1].adapt.k, 2);
        assert_eq!(cfgs[0].method, MethodKind::D3ipBase);
    }

    #[test]
    fn mbir_variant_forces_neighbor_sampling() {
        let cfg = ExperimentConfig {
            method: MethodKind::D3ipMbir,
            ..ExperimentConfig::default()
        };
        let a = cfg.effective_adapt();
        assert_eq!(a.approximator.method, Method::Mbir);
        assert_eq!(a.sampling_mode, SamplingMode::Neighbor);
    }

    #[test]
    fn task_operator_mismatch_is_rejected() {
        let cfg = ExperimentConfig {
            task: Task::Mri3d,
            operator: Some(OperatorSpec::sparse_view_ct(32, 10, 0.0)),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
