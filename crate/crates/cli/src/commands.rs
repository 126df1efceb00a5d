use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use neundiff::density::{bin_points, render_density};
use neundiff::detection::{detect_timed, DetectionConfig, DetectionParams, Rejections};
use neundiff::diffusion::{pm_run, DiffusionConfig, DiffusionParams};
use neundiff::metrics::{agreement_report, detection_stats, AgreementReport, DetectionStats};
use neundiff::points::{load_points, save_points};
use neundiff::raster::{load_raster, load_raster_with, save_raster, GrayMode};
use neundiff::synth::{generate, Cell, Speckle, SynthSpec};
use neundiff::{Point, PointSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::{DensityArgs, DetectArgs, DiffuseArgs, DiffusionArgs, EvalArgs, SynthArgs};
use crate::Usage;

pub const VERSION: &str = concat!("neundiff ", env!("CARGO_PKG_VERSION"));

/// Pixels in a full 30000 × 30000 section, for runtime extrapolation.
const SECTION_PIXELS: f64 = 30_000.0 * 30_000.0;

pub struct Options {
    pub timing: bool,
    pub verbose: bool,
}

impl Options {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuseRun {
    pub input: PathBuf,
    pub output: PathBuf,
    pub gray_mode: GrayMode,
    pub diffusion: DiffusionParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRun {
    pub input: PathBuf,
    pub output: PathBuf,
    pub gray_mode: GrayMode,
    pub detection: DetectionParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub raters: Vec<PathBuf>,
    pub detected: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub radius: f64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityRun {
    pub points: PathBuf,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub like: Option<PathBuf>,
    pub frame_size: usize,
    pub blur_sigma: f64,
    pub um_per_px: Option<f64>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub output: PathBuf,
    pub spec: SynthSpec,
}

/// Applies a `--config` file on top of the flag-derived run. The file may be
/// a bare run configuration or a report that embeds one under `"config"`.
fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut file: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(inner) = file.get_mut("config") {
        file = inner.take();
    }
    let mut merged = serde_json::to_value(flags)?;
    merge(&mut merged, file);
    serde_json::from_value(merged)
        .with_context(|| format!("invalid configuration in {}", path.display()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_points(path: &Path) -> Result<PointSet> {
    load_points(path).with_context(|| format!("reading points from {}", path.display()))
}

fn diffusion_params(a: &DiffusionArgs) -> Result<DiffusionParams> {
    Ok(DiffusionParams::new(DiffusionConfig {
        lambda: a.lambda,
        dt: a.dt(),
        n_iters: a.n_iters,
        boundary: a.boundary,
        diag_weight: a.diag_weight,
        spacing: a.spacing,
        stencil: a.stencil,
    })?)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn report_timing(stages: &[(&str, Duration)], pixels: usize) {
    let compute: Duration = stages.iter().map(|(_, d)| *d).sum();
    for (name, d) in stages {
        eprintln!("timing {name}_ms={:.3}", ms(*d));
    }
    let ns_per_pixel = compute.as_secs_f64() * 1e9 / pixels.max(1) as f64;
    eprintln!("timing total_ms={:.3}", ms(compute));
    eprintln!("timing ns_per_pixel={ns_per_pixel:.3}");
    eprintln!(
        "timing extrapolated_30000x30000_min={:.3}",
        ns_per_pixel * SECTION_PIXELS / 1e9 / 60.0
    );
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `prefix` with `ext` appended, keeping any dots already in the name.
fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn diffuse(args: DiffuseArgs, opts: &Options) -> Result<()> {
    let flags = DiffuseRun {
        input: args.input.input,
        output: args.output,
        gray_mode: args.input.gray_mode,
        diffusion: diffusion_params(&args.diffusion)?,
    };
    let run = resolve(flags, args.input.config.as_deref())?;
    opts.log(format!("diffusing {}", run.input.display()));
    let u0 = load_raster_with(&run.input, run.gray_mode)?;
    let t = Instant::now();
    let u = pm_run(&u0, &run.diffusion);
    let elapsed = t.elapsed();
    save_raster(&u, &run.output)?;
    if opts.timing {
        report_timing(&[("diffusion", elapsed)], u.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectReport<'a> {
    tool: &'static str,
    config: &'a DetectRun,
    params: &'a DetectionParams,
    threshold: f64,
    detections: &'a [Point],
    rejected: Rejections,
    runtime_ms: u64,
}

pub fn detect(args: DetectArgs, opts: &Options) -> Result<()> {
    let flags = DetectRun {
        input: args.input.input,
        output: args.output,
        gray_mode: args.input.gray_mode,
        detection: DetectionParams::new(DetectionConfig {
            diffusion: diffusion_params(&args.diffusion)?,
            intensity_threshold: args.intensity_threshold,
            min_blob_area: args.min_blob_area,
            connectivity: args.connectivity,
            auto_threshold: args.auto_threshold,
        })?,
    };
    let run = resolve(flags, args.input.config.as_deref())?;
    opts.log(format!("detecting in {}", run.input.display()));

    let started = Instant::now();
    let t = Instant::now();
    let image = load_raster_with(&run.input, run.gray_mode)?;
    let load = t.elapsed();
    let (detection, stages) = detect_timed(&image, &run.detection);
    opts.log(format!(
        "{} detections, {} raw minima, threshold {}",
        detection.points.len(),
        detection.raw_minima(),
        detection.threshold
    ));

    let t = Instant::now();
    save_points(&detection.points, with_ext(&run.output, "csv"))?;
    let report = DetectReport {
        tool: VERSION,
        config: &run,
        params: &run.detection,
        threshold: detection.threshold,
        detections: detection.points.points(),
        rejected: detection.rejected,
        runtime_ms: started.elapsed().as_millis() as u64,
    };
    write_json(&with_ext(&run.output, "json"), &report)?;
    let write = t.elapsed();

    if opts.timing {
        eprintln!("timing load_ms={:.3}", ms(load));
        eprintln!("timing write_ms={:.3}", ms(write));
        report_timing(
            &[
                ("diffusion", stages.diffusion),
                ("minima", stages.minima),
                ("filtering", stages.filtering),
            ],
            image.len(),
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    tool: &'static str,
    config: &'a EvalRun,
    #[serde(flatten)]
    agreement: Option<AgreementReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_stats: Option<DetectionStats>,
}

/// Rounds every float in `v` to four decimals.
fn round4(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(f) = n.as_f64() {
                *v = serde_json::json!((f * 1e4).round() / 1e4);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round4),
        Value::Object(map) => map.values_mut().for_each(round4),
        _ => {}
    }
}

pub fn eval(args: EvalArgs, _opts: &Options) -> Result<()> {
    let flags = EvalRun {
        raters: args.raters,
        detected: args.detected,
        truth: args.truth,
        radius: args.radius,
        output: args.output,
    };
    let run = resolve(flags, args.config.as_deref())?;
    if !(run.radius.is_finite() && run.radius >= 0.0) {
        return Err(Usage(format!("radius must be non-negative, got {}", run.radius)).into());
    }
    let raters = run
        .raters
        .iter()
        .map(|p| read_points(p))
        .collect::<Result<Vec<PointSet>>>()?;
    let detected = run.detected.as_deref().map(read_points).transpose()?;
    let truth = run.truth.as_deref().map(read_points).transpose()?;

    let agreement = match raters.len() {
        0 => None,
        1 => return Err(Usage("--raters needs at least two annotation files".into()).into()),
        _ => Some(agreement_report(&raters, detected.as_ref(), run.radius)?),
    };
    let stats = match (&truth, &detected) {
        (Some(t), Some(d)) => Some(detection_stats(t, d, run.radius)),
        (Some(_), None) => return Err(Usage("--truth requires --detected".into()).into()),
        _ => None,
    };
    if agreement.is_none() && stats.is_none() {
        return Err(
            Usage("nothing to evaluate: give --raters, or --truth with --detected".into()).into(),
        );
    }

    let mut value = serde_json::to_value(EvalReport {
        tool: VERSION,
        config: &run,
        agreement,
        detection_stats: stats,
    })?;
    round4(&mut value);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    match &run.output {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct DensityReport<'a> {
    tool: &'static str,
    config: &'a DensityRun,
    cols: usize,
    rows: usize,
    total: u64,
    max_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame_area_um2: Option<f64>,
}

pub fn density(args: DensityArgs, _opts: &Options) -> Result<()> {
    let flags = DensityRun {
        points: args.points,
        width: args.width,
        height: args.height,
        like: args.like,
        frame_size: args.frame_size,
        blur_sigma: args.blur_sigma,
        um_per_px: args.um_per_px,
        output: args.output,
    };
    let run = resolve(flags, args.config.as_deref())?;
    let (width, height) = match (run.width, run.height, &run.like) {
        (Some(w), Some(h), _) => (w, h),
        (None, None, Some(like)) => {
            let r = load_raster(like)?;
            (r.width(), r.height())
        }
        _ => return Err(Usage("give both --width and --height, or --like".into()).into()),
    };
    let points = read_points(&run.points)?;
    let grid = bin_points(&points, width, height, run.frame_size)?;
    let rendered = render_density(&grid, run.blur_sigma)?;
    save_raster(&rendered, with_ext(&run.output, "png"))?;
    let csv_path = with_ext(&run.output, "csv");
    fs::write(&csv_path, grid.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))?;
    let report = DensityReport {
        tool: VERSION,
        config: &run,
        cols: grid.cols,
        rows: grid.rows,
        total: grid.total(),
        max_count: grid.counts.iter().copied().max().unwrap_or(0),
        frame_area_um2: run.um_per_px.map(|u| grid.frame_area_um2(u)),
    };
    write_json(&with_ext(&run.output, "json"), &report)
}

#[derive(Serialize)]
struct SynthReport<'a> {
    tool: &'static str,
    config: &'a SynthRun,
    cells: &'a [Cell],
    speckles: &'a [Speckle],
}

pub fn synth(args: SynthArgs, opts: &Options) -> Result<()> {
    let flags = SynthRun {
        output: args.output,
        spec: SynthSpec {
            width: args.width,
            height: args.height,
            n_cells: args.n_cells,
            diameter_min: args.diameter_min,
            diameter_max: args.diameter_max,
            center_min: args.center_min,
            center_max: args.center_max,
            background: args.background,
            touching_fraction: args.touching_fraction,
            noise_amplitude: args.noise_amplitude,
            speckle_count: args.speckle_count,
            speckle_radius_min: args.speckle_radius_min,
            speckle_radius_max: args.speckle_radius_max,
            speckle_min: args.speckle_min,
            speckle_max: args.speckle_max,
            seed: args.seed,
        },
    };
    let run = resolve(flags, args.config.as_deref())?;
    let t = Instant::now();
    let s = generate(&run.spec)?;
    opts.log(format!(
        "generated {} cells in {:.1} ms",
        s.cells.len(),
        ms(t.elapsed())
    ));
    save_raster(&s.raster, with_ext(&run.output, "png"))?;
    save_points(&s.truth, with_ext(&run.output, "csv"))?;
    write_json(
        &with_ext(&run.output, "json"),
        &SynthReport {
            tool: VERSION,
            config: &run,
            cells: &s.cells,
            speckles: &s.speckles,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overrides_nested_fields_only() {
        let mut base = json!({"a": 1, "d": {"x": 1, "y": 2}});
        merge(&mut base, json!({"d": {"y": 5}, "e": true}));
        assert_eq!(base, json!({"a": 1, "d": {"x": 1, "y": 5}, "e": true}));
    }

    #[test]
    fn round4_leaves_integers() {
        let mut v = json!({"f": 0.666666, "n": 3, "l": [1.00004, 0.6]});
        round4(&mut v);
        assert_eq!(v, json!({"f": 0.6667, "n": 3, "l": [1.0, 0.6]}));
    }

    #[test]
    fn ext_appended_to_dotted_prefix() {
        assert_eq!(
            with_ext(Path::new("out/run.v2"), "csv"),
            PathBuf::from("out/run.v2.csv")
        );
    }
}
