use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;

use super::{MetricsRow, Report};
use crate::error::{Error, Result};
use crate::operators::io::write_volume;

pub const REPORT_HEADER: &str = "volume,slice,method,psnr,ssim,adapt_steps,seconds";

pub fn write_report_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{},{:.3}",
            r.volume, r.slice, r.method, r.psnr, r.ssim, r.adapt_steps, r.seconds
        )?;
    }
    w.flush()?;
    Ok(())
}

/// 16-bit grayscale PNG of a square image with values clamped to `[0, 1]`.
pub fn write_png16(path: &Path, image: &[f64]) -> Result<()> {
    let size = (image.len() as f64).sqrt().round() as usize;
    if size == 0 || size * size != image.len() {
        return Err(Error::invalid("PNG export expects a non-empty square image"));
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), size as u32, size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    let data: Vec<u8> = image
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    writer.write_image_data(&data).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))
}

fn write_trace(path: &Path, records: impl Iterator<Item = (usize, usize, f64)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,inner_step,loss")?;
    for (t, l, loss) in records {
        writeln!(w, "{t},{l},{loss:e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Report CSV, manifest, reconstruction volume, per-slice PNGs and, for
/// adapted methods, loss traces and final adapters.
pub(super) fn write_all(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_report_csv(&dir.join("report.csv"), &report.rows)?;
    write_volume(&dir.join("reconstruction.bin"), &report.volume)?;
    for (i, slice) in report.volume.iter().enumerate() {
        write_png16(&dir.join(format!("slice_{i:03}.png")), slice)?;
    }
    let mut files = vec!["report.csv".to_string(), "reconstruction.bin".to_string()];
    if let Some(rec) = &report.reconstruction {
        let per_slice = rec.trace.iter().any(|r| r.slice.is_some());
        if per_slice {
            for i in 0..report.volume.len() {
                let name = format!("trace_slice_{i:03}.csv");
                write_trace(
                    &dir.join(&name),
                    rec.trace
                        .iter()
                        .filter(|r| r.slice == Some(i))
                        .map(|r| (r.t, r.inner_step, r.loss)),
                )?;
                files.push(name);
            }
        }
        if rec.trace.iter().any(|r| r.slice.is_none()) {
            write_trace(
                &dir.join("trace.csv"),
                rec.trace
                    .iter()
                    .filter(|r| r.slice.is_none())
                    .map(|r| (r.t, r.inner_step, r.loss)),
            )?;
            files.push("trace.csv".to_string());
        }
        for (i, a) in rec.adapters.iter().enumerate() {
            let name = format!("adapters_{i:03}.lora");
            a.save(&dir.join(&name))?;
            files.push(name);
        }
        if let Some(meta) = &rec.meta_adapters {
            meta.save(&dir.join("meta_adapters.lora"))?;
            files.push("meta_adapters.lora".to_string());
        }
    }
    let c = report.counters;
    let manifest = json!({
        "method": report.config.method.name(),
        "label": report.label,
        "seeds": {
            "phantom": report.config.seeds.phantom,
            "measurement": report.config.seeds.measurement,
            "method": report.config.seeds.method,
        },
        "config": report.config.to_toml()?,
        "input_hash": report.input_hash,
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "counters": {
            "adapt_steps": c.adapt_steps,
            "denoiser_evals": c.denoiser_evals,
            "adapt_cg_iterations": c.adapt_cg_iterations,
            "sample_cg_iterations": c.sample_cg_iterations,
        },
        "phase_seconds": report.phase_seconds.iter().map(|(k, v)| json!({ "phase": k, "seconds": v })).collect::<Vec<_>>(),
        "files": files,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
