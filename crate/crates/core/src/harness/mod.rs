//! Experiment harness behind the `varin` binary: configs, artifact files,
//! metrics rows, sweeps and rendering.

pub mod config;
pub mod formats;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{FeatureGrid, TokenPyramid};
use crate::demo;
use crate::editing::{edit_regeneration, edit_varin, edit_varin_target_only, edit_with_noise, EditConfig, EditResult, LambdaKind};
use crate::error::{Error, Result};
use crate::inversion::{reconstruct, varin_invert, InverseNoiseSet};
use crate::metrics::{default_peak, mse, psnr_from_mse, ssim, token_agreement, RegionMask, SsimParams};
use crate::predictor::{Execution, Predictor};

use config::{EditMode, ExperimentConfig, SweepParameter};
use formats::{Artifact, Header};

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub digest: String,
    pub seed: u64,
    pub metric: String,
    pub scope: String,
    pub value: f64,
}

/// One line of a sweep CSV. `seed` is `"mean"` on summary lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub digest: String,
    pub parameter: String,
    pub param_value: f64,
    pub seed: String,
    pub metric: String,
    pub scope: String,
    pub value: f64,
}

/// Named measurement with its scope (`all`, `background`, `scale3`, ...).
pub type Measurement = (String, String, f64);

/// Files written by a command and short human-readable notes.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl Report {
    fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }
}

pub struct Source {
    pub grid: FeatureGrid,
    pub mask: Option<RegionMask>,
}

pub fn read_mask(path: &Path) -> Result<RegionMask> {
    RegionMask::from_ascii(&fs::read_to_string(path)?)
}

/// Loads the source grid from `input`, or else from the config's input
/// section. `mask` overrides the configured mask.
pub fn load_source(config: &ExperimentConfig, input: Option<&Path>, mask: Option<&Path>) -> Result<Source> {
    let section = config.input.clone().unwrap_or_default();
    let (grid, mut region) = match (input, &section.scene, &section.grid) {
        (Some(path), _, _) => (formats::read_grid(path)?.1, None),
        (None, Some(name), _) => {
            let scene = demo::scene(name)?;
            (scene.grid, Some(scene.mask))
        }
        (None, None, Some(path)) => (formats::read_grid(&config.resolve_path(path))?.1, None),
        (None, None, None) => return Err(Error::input("no input grid: pass a grid file or set [input] in the config")),
    };
    if let Some(path) = mask {
        region = Some(read_mask(path)?);
    } else if let Some(path) = &section.mask {
        region = Some(read_mask(&config.resolve_path(path))?);
    }
    if let Some(m) = &region {
        if m.shape() != (grid.height(), grid.width()) {
            return Err(Error::input("mask shape does not match the grid"));
        }
    }
    Ok(Source { grid, mask: region })
}

fn header(config: &ExperimentConfig) -> Header {
    Header {
        digest: config.digest(),
        seed: config.edit.seed,
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn rows(config: &ExperimentConfig, measurements: Vec<Measurement>) -> Vec<MetricRow> {
    let digest = config.digest_hex();
    measurements
        .into_iter()
        .map(|(metric, scope, value)| MetricRow {
            digest: digest.clone(),
            seed: config.edit.seed,
            metric,
            scope,
            value,
        })
        .collect()
}

fn m(metric: &str, scope: &str, value: f64) -> Measurement {
    (metric.to_string(), scope.to_string(), value)
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn execution(workers: usize) -> Execution {
    if workers > 1 {
        Execution::Parallel
    } else {
        Execution::Serial
    }
}

pub fn run_edit(predictor: &Predictor, src: &FeatureGrid, mode: EditMode, config: &EditConfig) -> Result<EditResult> {
    match mode {
        EditMode::Varin => edit_varin(predictor, src, config),
        EditMode::TargetOnly => edit_varin_target_only(predictor, src, config),
        EditMode::Regen => edit_regeneration(predictor, src, &config.target_label, config.start_scale, config.seed),
    }
}

/// Preservation metrics of an edit against its source. PSNR and SSIM use
/// the source's peak magnitude so runs on one source share a scale.
pub fn edit_metrics(source: &FeatureGrid, result: &EditResult, mask: Option<&RegionMask>) -> Result<Vec<Measurement>> {
    let peak = source.max_abs().max(f64::MIN_POSITIVE);
    let (_, h, w) = source.shape();
    let whole = mse(&result.grid, source, None)?;
    let mut out = vec![
        m("peak", "all", peak),
        m("mse", "all", whole),
        m("psnr", "all", psnr_from_mse(whole, peak)),
        m("ssim", "all", ssim(&result.grid, source, SsimParams::fitting(h, w, peak))?),
    ];
    if let Some(mask) = mask {
        let bg = mse(&result.grid, source, Some(mask))?;
        out.push(m("mse", "background", bg));
        out.push(m("psnr", "background", psnr_from_mse(bg, peak)));
    }
    out.push(m("token_change", "all", result.overall_change()));
    for (k, f) in result.change_fraction.iter().enumerate() {
        out.push(m("token_change", &format!("scale{}", k + 1), *f));
    }
    Ok(out)
}

pub fn cmd_encode(config: &ExperimentConfig, input: Option<&Path>) -> Result<Report> {
    let source = load_source(config, input, None)?;
    let codec = config.codec.build()?;
    let pyramid = codec.encode(&source.grid)?;
    let decoded = codec.decode(&pyramid)?;
    let peak = default_peak(&source.grid, &decoded).max(f64::MIN_POSITIVE);
    let (_, h, w) = decoded.shape();
    let err = mse(&decoded, &source.grid, None)?;
    let round_trip = token_agreement(&codec.encode(&decoded)?, &pyramid)?;
    let mut measurements = vec![
        m("peak", "all", peak),
        m("mse", "all", err),
        m("psnr", "all", psnr_from_mse(err, peak)),
        m("ssim", "all", ssim(&decoded, &source.grid, SsimParams::fitting(h, w, peak))?),
        m("token_round_trip", "all", round_trip.overall),
    ];
    if let Some(mask) = &source.mask {
        measurements.push(m("mse", "background", mse(&decoded, &source.grid, Some(mask))?));
    }
    let head = header(config);
    let mut report = Report::default();
    report.write(&config.out, "encoded.vrpy", &formats::pyramid_bytes(&head, &pyramid, codec.vocab()))?;
    report.write(&config.out, "decoded.vrgd", &formats::grid_bytes(&head, &decoded))?;
    report.write(&config.out, "encode.csv", &csv_bytes(&rows(config, measurements))?)?;
    report.notes.push(format!("reconstruction mse {err} psnr {}", psnr_from_mse(err, peak)));
    Ok(report)
}

fn inversion_label(config: &ExperimentConfig) -> &str {
    match config.edit.mode {
        EditMode::TargetOnly => &config.edit.target_label,
        _ => &config.edit.source_label,
    }
}

fn rounded(noise: &InverseNoiseSet) -> Result<InverseNoiseSet> {
    let maps = noise
        .maps
        .iter()
        .map(|n| {
            let values = n.values().iter().map(|&v| v as f32 as f64).collect();
            crate::logits::NoiseMap::new(n.height(), n.width(), n.classes(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseNoiseSet {
        maps,
        provenance: noise.provenance.clone(),
    })
}

pub fn cmd_invert(config: &ExperimentConfig, input: Option<&Path>, workers: usize) -> Result<Report> {
    let source = load_source(config, input, None)?;
    let predictor = config.predictor()?;
    let codec = predictor.codec();
    let pyramid = codec.encode(&source.grid)?;
    let cond = predictor.condition(inversion_label(config));
    let edit = &config.edit;
    let tau = edit.tau.unwrap_or_default();
    let noise = with_workers(workers, || {
        varin_invert(&predictor, &pyramid, &cond, edit.kind, tau, edit.seed, execution(workers))
    })??;
    let exact = token_agreement(&reconstruct(&predictor, &noise, &cond)?, &pyramid)?.overall;
    let stored = token_agreement(&reconstruct(&predictor, &rounded(&noise)?, &cond)?, &pyramid)?.overall;
    let head = header(config);
    let mut report = Report::default();
    report.write(&config.out, "noise.vrns", &formats::noise_bytes(&head, &noise, &codec.schedule, codec.vocab()))?;
    let measurements = vec![m("reconstruction", "all", exact), m("reconstruction", "stored", stored)];
    report.write(&config.out, "invert.csv", &csv_bytes(&rows(config, measurements))?)?;
    report.notes.push(format!("{} inversion, tau {tau}, reconstruction {exact}, stored {stored}", edit.kind));
    if noise.provenance.sensitive() {
        report.notes.push("tau = 0: the label lead is arbitrarily thin (sensitive regime)".into());
    }
    Ok(report)
}

fn checked_noise(config: &ExperimentConfig, predictor: &Predictor, source: &TokenPyramid, path: &Path) -> Result<InverseNoiseSet> {
    let file = formats::read_noise(path)?;
    let codec = predictor.codec();
    if file.vocab != codec.vocab() || file.schedule != codec.schedule {
        return Err(Error::input("noise file was written for a different codec"));
    }
    let label = inversion_label(config);
    if file.noise.provenance.label != label {
        return Err(Error::input(format!(
            "noise file was inverted under {:?}, this mode needs {label:?}",
            file.noise.provenance.label
        )));
    }
    let cond = predictor.condition(label);
    if reconstruct(predictor, &file.noise, &cond)? != *source {
        return Err(Error::input("noise file does not reconstruct the input grid"));
    }
    Ok(file.noise)
}

pub struct EditInputs<'a> {
    pub input: Option<&'a Path>,
    pub noise: Option<&'a Path>,
    pub mask: Option<&'a Path>,
    pub auto_invert: bool,
}

pub fn cmd_edit(config: &ExperimentConfig, inputs: EditInputs<'_>) -> Result<Report> {
    let source = load_source(config, inputs.input, inputs.mask)?;
    let predictor = config.predictor()?;
    let edit = config.edit.edit_config();
    let mode = config.edit.mode;
    let result = match (mode, inputs.noise) {
        (EditMode::Regen, _) => run_edit(&predictor, &source.grid, mode, &edit)?,
        (_, Some(path)) => {
            let pyramid = predictor.codec().encode(&source.grid)?;
            let noise = checked_noise(config, &predictor, &pyramid, path)?;
            edit_with_noise(&predictor, &pyramid, &noise, &edit)?
        }
        (_, None) if inputs.auto_invert => run_edit(&predictor, &source.grid, mode, &edit)?,
        (_, None) => return Err(Error::input(format!("{mode} mode needs a noise file or --auto-invert"))),
    };
    let measurements = edit_metrics(&source.grid, &result, source.mask.as_ref())?;
    let head = header(config);
    let mut report = Report::default();
    report.write(&config.out, "edited.vrpy", &formats::pyramid_bytes(&head, &result.pyramid, predictor.codec().vocab()))?;
    report.write(&config.out, "edited.vrgd", &formats::grid_bytes(&head, &result.grid))?;
    report.write(&config.out, "edit.csv", &csv_bytes(&rows(config, measurements))?)?;
    report.notes.push(format!("{mode} edit changed {:.4} of tokens", result.overall_change()));
    Ok(report)
}

fn apply_sweep_value(edit: &mut EditConfig, parameter: SweepParameter, value: f64) {
    match parameter {
        SweepParameter::Tau => edit.tau = value,
        SweepParameter::StartScale => edit.start_scale = value as usize,
        SweepParameter::Lambda => edit.lambda = LambdaKind::Constant(value),
    }
}

/// Every (value, seed) run in grid order, then per-value means.
pub fn sweep_rows(config: &ExperimentConfig, workers: usize) -> Result<Vec<SweepRow>> {
    let sweep = config.sweep_section()?;
    let source = load_source(config, None, None)?;
    let predictor = config.predictor()?;
    let seeds = sweep.seed_list(config.edit.seed);
    let jobs: Vec<(f64, u64)> = sweep.values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let mode = config.edit.mode;
    let results: Vec<Vec<Measurement>> = with_workers(workers, || {
        jobs.par_iter()
            .map(|&(value, seed)| {
                let mut edit = config.edit.edit_config();
                edit.seed = seed;
                apply_sweep_value(&mut edit, sweep.parameter, value);
                let result = run_edit(&predictor, &source.grid, mode, &edit)?;
                edit_metrics(&source.grid, &result, source.mask.as_ref())
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let digest = config.digest_hex();
    let parameter = sweep.parameter.as_str().to_string();
    let row = |value: f64, seed: String, (metric, scope, v): &Measurement| SweepRow {
        digest: digest.clone(),
        parameter: parameter.clone(),
        param_value: value,
        seed,
        metric: metric.clone(),
        scope: scope.clone(),
        value: *v,
    };
    let mut out = Vec::new();
    for (&(value, seed), ms) in jobs.iter().zip(&results) {
        out.extend(ms.iter().map(|x| row(value, seed.to_string(), x)));
    }
    for (i, &value) in sweep.values.iter().enumerate() {
        let runs = &results[i * seeds.len()..(i + 1) * seeds.len()];
        for (j, (metric, scope, _)) in runs[0].iter().enumerate() {
            let mean = runs.iter().map(|r| r[j].2).sum::<f64>() / runs.len() as f64;
            out.push(row(value, "mean".into(), &(metric.clone(), scope.clone(), mean)));
        }
    }
    Ok(out)
}

pub fn cmd_sweep(config: &ExperimentConfig, workers: usize) -> Result<Report> {
    let rows = sweep_rows(config, workers)?;
    let mut report = Report::default();
    report.write(&config.out, "sweep.csv", &csv_bytes(&rows)?)?;
    report.notes.push(format!("{} rows", rows.len()));
    Ok(report)
}

/// One PGM per scale of a pyramid file or per channel of a grid file.
pub fn cmd_render(path: &Path, out: &Path) -> Result<Report> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "render".into());
    let mut report = Report::default();
    match formats::read_artifact(path)? {
        Artifact::Pyramid(file) => {
            let comment = format!("digest {} seed {}", file.header.digest_hex(), file.header.seed);
            for (k, map) in file.pyramid.maps.iter().enumerate() {
                let bytes = render::pgm(map.width(), map.height(), &render::token_levels(map, file.vocab), &comment);
                report.write(out, &format!("{stem}.scale{}.pgm", k + 1), &bytes)?;
            }
        }
        Artifact::Grid(head, grid) => {
            let comment = format!("digest {} seed {}", head.digest_hex(), head.seed);
            for c in 0..grid.channels() {
                let bytes = render::pgm(grid.width(), grid.height(), &render::channel_levels(&grid, c), &comment);
                report.write(out, &format!("{stem}.ch{c}.pgm"), &bytes)?;
            }
        }
        Artifact::Noise(_) => return Err(Error::input("render takes grid or pyramid files")),
    }
    Ok(report)
}

/// Bundled experiment configs, by file name.
pub const DEMO_CONFIGS: [(&str, &str); 4] = [
    ("square.toml", include_str!("../../fixtures/square.toml")),
    ("disc.toml", include_str!("../../fixtures/disc.toml")),
    ("square-start.toml", include_str!("../../fixtures/square-start.toml")),
    ("square-target.toml", include_str!("../../fixtures/square-target.toml")),
];

/// Writes the bundled scenes (grid + mask) and configs to `out`.
pub fn cmd_demo(out: &Path) -> Result<Report> {
    let mut report = Report::default();
    for (name, text) in DEMO_CONFIGS {
        report.write(out, name, text.as_bytes())?;
    }
    for name in demo::SCENE_NAMES {
        let text = DEMO_CONFIGS
            .iter()
            .find(|(file, _)| *file == format!("{name}.toml"))
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Invariant(format!("no bundled config for {name}")))?;
        let config = ExperimentConfig::parse(text, PathBuf::new(), &Default::default())?;
        let scene = demo::scene(name)?;
        report.write(out, &format!("{name}.vrgd"), &formats::grid_bytes(&header(&config), &scene.grid))?;
        report.write(out, &format!("{name}.mask"), scene.mask.to_ascii().as_bytes())?;
    }
    Ok(report)
}
