use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qfnlos::aggregate::{aggregate_stream_multi, aggregate_time_multi, EventAccumulator};
use qfnlos::bench::{audit_memory, run_scaling, ScalingConfig};
use qfnlos::forward::{render_events, render_histogram, EventSynthesizer, Noise, RenderOptions, SceneSliceStream};
use qfnlos::io::{
    open_bin_stream, read_histogram, transpose_histogram_file, write_events, write_field, write_histogram_with,
    write_image_pgm, write_reconstruction, Dtype, EventFileReader, HistogramWriteOptions, Normalization,
};
use qfnlos::ledger::MemoryLedger;
use qfnlos::pipeline::{
    reconstruct_events, reconstruct_histogram, reconstruct_stream, DsChoice, Mode, PipelineConfig, PipelineOutput,
    PipelineRun,
};
use qfnlos::{AggregatedField, Real, Reconstruction, WallGrid};

use crate::config::Config;
use crate::error::CliError;
use crate::scene::load_scene;

pub const DEFAULT_PHOTONS: f64 = 100.0;

#[derive(Debug, Clone, Copy, Default)]
pub struct Report {
    pub timing_csv: bool,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn render(cfg: &Config) -> Result<(), CliError> {
    let scene = load_scene(&cfg.require_path("scene")?)?;
    let grid = cfg.grid()?;
    let nt: usize = cfg.require("nt")?;
    let bin_length: f64 = cfg.require("bin_length")?;
    let falloff = cfg.falloff()?;
    let out = cfg.require_path("histogram")?;
    let opts = RenderOptions {
        deposit: cfg.deposit()?,
        noise: cfg.noise()?,
        rng_seed: cfg.seed()?,
    };
    let write_opts = HistogramWriteOptions {
        dtype: cfg.dtype(Dtype::F64)?,
        layout: cfg.layout()?,
    };
    let rendered = render_histogram(&scene, &grid, nt, bin_length, falloff, &opts)?;
    write_histogram_with(&out, &rendered.histogram, write_opts)?;
    say!(
        "histogram {}: {}x{} pixels, {nt} bins of {bin_length} m, {} surfels",
        out.display(),
        grid.nx(),
        grid.ny(),
        scene.len()
    );
    let clip = rendered.clip;
    say!(
        "clip report: {} deposits clipped, mass {:.6e}",
        clip.clipped_deposits, clip.clipped_mass
    );
    if !clip.is_clean() {
        eprintln!("warning: paths beyond nt * bin_length were dropped");
    }
    if let Some(path) = cfg.path("events") {
        let photons = cfg.get("photons")?.unwrap_or(DEFAULT_PHOTONS);
        let events = render_events(&scene, &grid, falloff, photons, cfg.seed()?)?;
        write_events(&path, &events)?;
        say!("events {}: {} photons", path.display(), events.len());
    }
    Ok(())
}

enum Input {
    Histogram(PathBuf),
    Events(PathBuf),
}

fn input(cfg: &Config, mode: Mode) -> Result<Input, CliError> {
    match mode {
        Mode::Fdh => cfg
            .path("events")
            .map(Input::Events)
            .ok_or_else(|| CliError::Usage("mode fdh reads an event file; set `events`".into())),
        _ => cfg
            .path("histogram")
            .map(Input::Histogram)
            .ok_or_else(|| CliError::Usage(format!("mode {mode} reads a histogram file; set `histogram`"))),
    }
}

fn max_tof_path(path: &Path) -> Result<f64, CliError> {
    let mut max = 0.0f64;
    for ev in EventFileReader::open(path)? {
        max = max.max(ev?.tof_path);
    }
    Ok(max)
}

/// Largest path hint for fdh runs, or `None` when `ds`/`max_depth` already fix Δs.
fn fdh_hint(cfg: &Config, path: &Path) -> Result<Option<f64>, CliError> {
    if cfg.ds_is_pinned() {
        return Ok(None);
    }
    let max = max_tof_path(path)?;
    say!("pre-pass over {}: largest path {max:.6} m", path.display());
    Ok(Some(max))
}

/// The fdh path must never hold a buffer that grows like N³.
fn check_no_volume(ledger: &MemoryLedger, grid: &WallGrid) -> Result<(), CliError> {
    let limit = grid.len().max(4 * grid.nx().max(grid.ny()));
    match ledger.entries().into_iter().find(|b| b.elements > limit) {
        Some(b) => Err(CliError::Core(qfnlos::Error::Data(format!(
            "fdh accounting: buffer {b} exceeds the {limit}-element plane"
        )))),
        None => Ok(()),
    }
}

fn reconstruct_typed<T: Real>(cfg: &Config, pc: &PipelineConfig, mode: Mode) -> Result<PipelineOutput, CliError> {
    match input(cfg, mode)? {
        Input::Histogram(path) if mode == Mode::Traditional => {
            let hist = read_histogram(&path)?;
            Ok(reconstruct_histogram::<T>(&hist, pc)?)
        }
        Input::Histogram(path) => {
            let mut stream = open_bin_stream(&path)?;
            Ok(reconstruct_stream::<T, _>(&mut stream, pc)?)
        }
        Input::Events(path) => {
            let hint = fdh_hint(cfg, &path)?;
            let reader = EventFileReader::open(&path)?;
            let grid = *reader.grid();
            let falloff = reader.falloff();
            let io_bytes = reader.buffer_bytes();
            let out = reconstruct_events::<T, _>(&grid, falloff, reader, pc, hint)?;
            check_no_volume(&out.run.ledger, &grid)?;
            out.run.ledger.register("event_io", io_bytes, 1);
            Ok(out)
        }
    }
}

fn describe_ds(run: &PipelineRun, pc: &PipelineConfig) -> String {
    let ds = run.s2 - run.s1;
    let how = match (pc.ds, run.range) {
        (DsChoice::Explicit(_), _) => "explicit".to_string(),
        (_, Some(r)) => format!("default rule for max depth {:.6} m", r.max_depth),
        (_, None) => "default rule".to_string(),
    };
    format!("s1 = {} m, s2 = {} m, ds = {ds:.6e} m ({how})", run.s1, run.s2)
}

pub fn print_run(run: &PipelineRun, pc: &PipelineConfig, report: Report) {
    say!("mode {}: {}", run.mode, describe_ds(run, pc));
    for (s, rep) in [(run.s1, run.sampling[0]), (run.s2, run.sampling[1])] {
        if rep.is_aliased() {
            eprintln!(
                "warning: chirp at s = {s} m is aliased (max phase step {:.3} rad > pi)",
                rep.max_phase_step
            );
        }
    }
    if let Some(r) = run.range.filter(|r| !r.is_ok()) {
        eprintln!(
            "warning: max depth {:.4} m exceeds the unambiguous depth {:.4} m",
            r.max_depth, r.unambiguous_depth
        );
    }
    for t in &run.timings {
        say!("stage {:<10} {:.4} s", t.stage, t.seconds);
    }
    say!("memory ledger:\n{}", run.ledger);
    if report.timing_csv {
        say_raw!("{}", run.timing_csv());
    }
}

pub fn write_outputs(dir: &Path, rec: &Reconstruction) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_reconstruction(&dir.join("reconstruction.bin"), rec)?;
    let norm = Normalization::default();
    write_image_pgm(&dir.join("albedo.pgm"), &rec.albedo, &rec.grid, norm)?;
    let depth: Vec<f64> = rec
        .depth
        .iter()
        .zip(&rec.valid)
        .map(|(&d, &v)| if v { d } else { f64::NAN })
        .collect();
    write_image_pgm(&dir.join("depth.pgm"), &depth, &rec.grid, norm)?;
    let mask: Vec<f64> = rec.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    write_image_pgm(&dir.join("mask.pgm"), &mask, &rec.grid, Normalization::Max)?;
    Ok(())
}

fn reconstruct_into(cfg: &Config, dir: &Path, report: Report) -> Result<PipelineOutput, CliError> {
    let pc = cfg.pipeline()?;
    let mode = cfg.mode()?;
    let out = match cfg.dtype(Dtype::F64)? {
        Dtype::F32 => reconstruct_typed::<f32>(cfg, &pc, mode)?,
        Dtype::F64 => reconstruct_typed::<f64>(cfg, &pc, mode)?,
    };
    print_run(&out.run, &pc, report);
    write_outputs(dir, &out.reconstruction)?;
    say!("outputs in {}", dir.display());
    Ok(out)
}

pub fn reconstruct(cfg: &Config, report: Report) -> Result<(), CliError> {
    let dir = cfg.require_path("out_dir")?;
    reconstruct_into(cfg, &dir, report).map(|_| ())
}

fn aggregate_typed<T: Real>(
    cfg: &Config,
    pc: &PipelineConfig,
    mode: Mode,
) -> Result<Vec<AggregatedField<T>>, CliError> {
    let s_pair = |bound: Option<f64>| -> Result<[f64; 2], CliError> {
        let (ds, _) = pc.resolve_ds(bound)?;
        Ok([pc.s, pc.s + ds])
    };
    let fields = match input(cfg, mode)? {
        Input::Histogram(path) if mode == Mode::Traditional => {
            let hist = read_histogram(&path)?;
            aggregate_time_multi::<T>(&hist, &s_pair(Some(hist.max_path()))?)?
        }
        Input::Histogram(path) => {
            let mut stream = open_bin_stream(&path)?;
            let header = *stream.header();
            let s = s_pair(Some(header.nt as f64 * header.bin_length))?;
            aggregate_stream_multi::<T, _>(&mut stream, &s)?
        }
        Input::Events(path) => {
            let s = s_pair(fdh_hint(cfg, &path)?)?;
            let reader = EventFileReader::open(&path)?;
            let mut acc = EventAccumulator::<T>::new(*reader.grid(), reader.falloff(), &s)?;
            for ev in reader {
                acc.push(&ev?)?;
            }
            acc.finish()?
        }
    };
    Ok(fields)
}

fn write_fields<T: Real>(dir: &Path, fields: &[AggregatedField<T>]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    for (name, field) in ["phi_s1.bin", "phi_s2.bin"].iter().zip(fields) {
        write_field(&dir.join(name), field)?;
    }
    say!(
        "s1 = {} m, s2 = {} m, ds = {:.6e} m; fields in {}",
        fields[0].s(),
        fields[1].s(),
        fields[1].s() - fields[0].s(),
        dir.display()
    );
    Ok(())
}

pub fn aggregate(cfg: &Config) -> Result<(), CliError> {
    let dir = cfg.require_path("out_dir")?;
    let pc = cfg.pipeline()?;
    let mode = cfg.mode()?;
    match cfg.dtype(Dtype::F64)? {
        Dtype::F32 => write_fields(&dir, &aggregate_typed::<f32>(cfg, &pc, mode)?),
        Dtype::F64 => write_fields(&dir, &aggregate_typed::<f64>(cfg, &pc, mode)?),
    }
}

fn pipeline_typed<T: Real>(cfg: &Config, pc: &PipelineConfig, mode: Mode) -> Result<PipelineOutput, CliError> {
    let scene = load_scene(&cfg.require_path("scene")?)?;
    let grid = cfg.grid()?;
    let falloff = cfg.falloff()?;
    match mode {
        Mode::Traditional => {
            let opts = RenderOptions {
                deposit: cfg.deposit()?,
                noise: cfg.noise()?,
                rng_seed: cfg.seed()?,
            };
            let rendered = render_histogram(
                &scene,
                &grid,
                cfg.require("nt")?,
                cfg.require("bin_length")?,
                falloff,
                &opts,
            )?;
            if !rendered.clip.is_clean() {
                eprintln!("warning: {} deposits clipped", rendered.clip.clipped_deposits);
            }
            Ok(reconstruct_histogram::<T>(&rendered.histogram, pc)?)
        }
        Mode::Loading => {
            if cfg.noise()? != Noise::None {
                return Err(CliError::Usage(
                    "noise is not available when rendering slices on demand".into(),
                ));
            }
            let mut stream = SceneSliceStream::new(
                &scene,
                &grid,
                cfg.require("nt")?,
                cfg.require("bin_length")?,
                falloff,
                cfg.deposit()?,
            )?;
            Ok(reconstruct_stream::<T, _>(&mut stream, pc)?)
        }
        Mode::Fdh => {
            let photons = cfg.get("photons")?.unwrap_or(DEFAULT_PHOTONS);
            let synth = EventSynthesizer::new(&scene, &grid, falloff, photons, cfg.seed()?)?;
            let hint = if cfg.ds_is_pinned() {
                None
            } else {
                Some(synth.iter().map(|e| e.tof_path).fold(0.0, f64::max))
            };
            let out = reconstruct_events::<T, _>(&grid, falloff, synth.iter().map(Ok), pc, hint)?;
            check_no_volume(&out.run.ledger, &grid)?;
            Ok(out)
        }
    }
}

/// Scene in, reconstruction out, nothing written in between.
pub fn pipeline(cfg: &Config, report: Report) -> Result<(), CliError> {
    let dir = cfg.require_path("out_dir")?;
    let pc = cfg.pipeline()?;
    let mode = cfg.mode()?;
    let out = match cfg.dtype(Dtype::F64)? {
        Dtype::F32 => pipeline_typed::<f32>(cfg, &pc, mode)?,
        Dtype::F64 => pipeline_typed::<f64>(cfg, &pc, mode)?,
    };
    print_run(&out.run, &pc, report);
    write_outputs(&dir, &out.reconstruction)?;
    let (i, j) = out.reconstruction.albedo_peak();
    say!(
        "peak ({i}, {j}): albedo {:.6e}, depth {:.6} m; outputs in {}",
        out.reconstruction.albedo_at(i, j),
        out.reconstruction.depth_at(i, j),
        dir.display()
    );
    Ok(())
}

/// Peak energy over total energy: 1 for a single hot pixel, 1/N² for a flat map.
pub fn peak_sharpness(albedo: &[f64]) -> f64 {
    let total: f64 = albedo.iter().map(|a| a * a).sum();
    let peak = albedo.iter().copied().fold(0.0, f64::max);
    if total > 0.0 {
        peak * peak / total
    } else {
        0.0
    }
}

pub const SWEEP_HEADER: &str = "s,s2,peak_i,peak_j,peak_albedo,peak_sharpness,aliased,status";

pub fn sweep(cfg: &Config, s_list: &[f64], report: Report) -> Result<(), CliError> {
    if s_list.is_empty() {
        return Err(CliError::Usage("sweep needs at least one s".into()));
    }
    let dir = cfg.require_path("out_dir")?;
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut failures = 0;
    for &s in s_list {
        let mut run_cfg = cfg.clone();
        run_cfg.set("s", s.to_string(), "--s-list".into());
        say!("== s = {s}");
        match reconstruct_into(&run_cfg, &dir.join(format!("s_{s}")), report) {
            Ok(out) => {
                let rec = &out.reconstruction;
                let (i, j) = rec.albedo_peak();
                let aliased = out.run.sampling.iter().any(|r| r.is_aliased());
                let _ = writeln!(
                    csv,
                    "{s},{},{i},{j},{:.9e},{:.6e},{aliased},ok",
                    out.run.s2,
                    rec.albedo_at(i, j),
                    peak_sharpness(&rec.albedo)
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("s = {s} failed: {e}");
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = writeln!(csv, "{s},,,,,,,error: {msg}");
            }
        }
    }
    let path = dir.join("sweep.csv");
    fs::write(&path, csv).map_err(io_error(&path))?;
    say!(
        "summary {} ({} of {} runs failed)",
        path.display(),
        failures,
        s_list.len()
    );
    Ok(())
}

pub fn parse_mode(name: &str) -> Result<Mode, CliError> {
    name.parse()
        .map_err(|_| CliError::Usage(format!("unknown mode `{name}`; expected traditional, loading or fdh")))
}

pub fn bench(
    cfg: &Config,
    modes: &[String],
    sizes: &[usize],
    repeats: usize,
    threads: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let modes = modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?;
    let scaling = ScalingConfig {
        modes,
        sizes: sizes.to_vec(),
        repeats,
        dtype: cfg.dtype(Dtype::F32)?,
        threads,
        ..ScalingConfig::default()
    };
    let report = run_scaling(&scaling)?;
    let rows = report.to_csv();
    let slopes = report.slopes_csv();
    say!("threads {}, repeats {}", report.threads, report.repeats);
    say_raw!("{rows}");
    say_raw!("{slopes}");
    if let Some(path) = out {
        fs::write(path, &rows).map_err(io_error(path))?;
        let slopes_path = path.with_extension("slopes.csv");
        fs::write(&slopes_path, &slopes).map_err(io_error(&slopes_path))?;
        say!("wrote {} and {}", path.display(), slopes_path.display());
    }
    Ok(())
}

pub fn audit(cfg: &Config, n: usize) -> Result<(), CliError> {
    let mode = if cfg.raw("mode").is_some() {
        cfg.mode()?
    } else {
        Mode::Fdh
    };
    let result = audit_memory(mode, n, cfg.dtype(Dtype::F32)?)?;
    say!("{}", result.summary());
    say!("within caps");
    Ok(())
}

pub fn transpose(src: &Path, dst: &Path) -> Result<(), CliError> {
    transpose_histogram_file(src, dst)?;
    say!("{} -> {} (time-major)", src.display(), dst.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharpness_of_single_pixel_and_flat_maps() {
        assert_eq!(peak_sharpness(&[0.0, 3.0, 0.0, 0.0]), 1.0);
        assert_eq!(peak_sharpness(&[2.0; 4]), 0.25);
        assert_eq!(peak_sharpness(&[0.0; 4]), 0.0);
    }

    #[test]
    fn fdh_input_requires_events() {
        let cfg = Config::parse_str("histogram = h.bin\n", "c").unwrap();
        assert!(matches!(input(&cfg, Mode::Fdh), Err(CliError::Usage(_))));
        assert!(matches!(input(&cfg, Mode::Loading), Ok(Input::Histogram(_))));
    }

    #[test]
    fn volume_check_flags_cube_sized_buffers() {
        let grid = WallGrid::centered(16, 0.1).unwrap();
        let ledger = MemoryLedger::new();
        ledger.register("phi_s1", 256, 8);
        ledger.register("fft_line", 32, 8);
        assert!(check_no_volume(&ledger, &grid).is_ok());
        ledger.register("histogram", 256 * 16, 8);
        assert!(check_no_volume(&ledger, &grid).is_err());
    }
}
