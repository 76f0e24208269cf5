//! Memory audits and runtime scaling for the three pipeline modes.
//!
//! Inputs are synthesized per grid size from a fixed three-surfel scene on a
//! 1 m wall, so only the grid resolution changes between sizes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::{render_histogram, Deposit, EventSynthesizer, RenderOptions, SceneSliceStream};
use crate::io::Dtype;
use crate::ledger::MemoryLedger;
use crate::model::{Falloff, Real, SceneSurfels, Surfel, WallGrid};
use crate::pipeline::{
    reconstruct_events_rows, reconstruct_histogram, reconstruct_stream, DsChoice, Mode, PipelineConfig, PipelineRun,
};

/// Transform parameter used by every benchmark run.
pub const BENCH_S: f64 = 0.05;
/// Side of the square relay wall, meters.
pub const WALL_EXTENT: f64 = 1.0;
/// Depth bound used for the Δs rule; all scene surfels lie shallower.
pub const BENCH_MAX_DEPTH: f64 = 1.5;
/// Largest expected photon count per (surfel, pixel) pair in fdh runs.
pub const BENCH_PHOTONS: f64 = 4.0;
/// fdh budget at N = 512 with 8-byte complex elements.
pub const FDH_CAP_BYTES: u64 = 5 << 20;

pub fn bench_scene() -> SceneSurfels {
    [
        ([0.0, 0.0, 0.5], 1.0),
        ([0.2, -0.15, 0.7], 0.8),
        ([-0.25, 0.2, 0.9], 0.6),
    ]
    .into_iter()
    .map(|(p, a)| Surfel::new(p, a).expect("valid surfel"))
    .collect()
}

pub fn bench_grid(n: usize) -> Result<WallGrid> {
    WallGrid::centered(n, WALL_EXTENT / n as f64)
}

/// Time axis for histogram modes: `nt = n` bins covering every round trip of the scene.
pub fn bench_time_axis(n: usize) -> (usize, f64) {
    (n, 3.0 / n as f64)
}

fn bench_config() -> PipelineConfig {
    PipelineConfig {
        ds: DsChoice::FromMaxDepth(BENCH_MAX_DEPTH),
        ..PipelineConfig::new(BENCH_S)
    }
}

/// Runs one pipeline pass of `mode` at grid size `n` with field storage `T`.
pub fn run_once<T: Real>(mode: Mode, n: usize) -> Result<PipelineRun> {
    let grid = bench_grid(n)?;
    let scene = bench_scene();
    let cfg = bench_config();
    let falloff = Falloff::Isotropic;
    match mode {
        Mode::Traditional => {
            let (nt, bl) = bench_time_axis(n);
            let hist = render_histogram(&scene, &grid, nt, bl, falloff, &RenderOptions::default())?.histogram;
            Ok(reconstruct_histogram::<T>(&hist, &cfg)?.run)
        }
        Mode::Loading => {
            let (nt, bl) = bench_time_axis(n);
            let mut stream = SceneSliceStream::new(&scene, &grid, nt, bl, falloff, Deposit::LinearSplit)?;
            Ok(reconstruct_stream::<T, _>(&mut stream, &cfg)?.run)
        }
        Mode::Fdh => {
            let synth = EventSynthesizer::new(&scene, &grid, falloff, BENCH_PHOTONS, 7)?;
            let mut peak = 0.0f64;
            reconstruct_events_rows::<T, _, _>(&grid, falloff, synth.iter().map(Ok), &cfg, None, |_, row| {
                peak = row.iter().fold(peak, |m, p| m.max(p.albedo));
                Ok(())
            })
        }
    }
}

/// Byte cap a mode must respect at grid size `n`, if any.
///
/// fdh: 5 MiB at N = 512 for f32 pairs, scaled by N² above 512 and doubled for f64.
/// loading: no single buffer may reach `N²·nt` elements; the largest must fit in `N²·24` bytes.
pub fn fdh_cap(n: usize, element_bytes: usize) -> u64 {
    let scale = ((n * n) as f64 / (512.0 * 512.0)).max(1.0);
    (FDH_CAP_BYTES as f64 * scale * (element_bytes as f64 / 4.0)).round() as u64
}

/// Audit outcome: the ledger plus the caps that were checked.
#[derive(Debug)]
pub struct MemoryAudit {
    pub mode: Mode,
    pub n: usize,
    pub dtype: Dtype,
    /// Limit on the ledger total (fdh).
    pub total_cap: Option<u64>,
    /// Limit on any single buffer (loading).
    pub buffer_cap: Option<u64>,
    pub ledger: MemoryLedger,
}

impl MemoryAudit {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "memory audit: mode={} N={} dtype={:?}\n{}",
            self.mode, self.n, self.dtype, self.ledger
        );
        let mib = |b: u64| b as f64 / (1u64 << 20) as f64;
        if let Some(cap) = self.total_cap {
            let _ = write!(out, "\n  total cap {cap} B ({:.3} MiB)", mib(cap));
        }
        if let Some(cap) = self.buffer_cap {
            let _ = write!(out, "\n  per-buffer cap {cap} B ({:.3} MiB)", mib(cap));
        }
        if self.total_cap.is_none() && self.buffer_cap.is_none() {
            out.push_str("\n  no cap for this mode");
        }
        out
    }
}

fn check_loading(ledger: &MemoryLedger, n: usize) -> Result<()> {
    let (nt, _) = bench_time_axis(n);
    let limit_elements = n * n * nt;
    let limit_bytes = (n * n * 24) as u64;
    let offenders: Vec<String> = ledger
        .entries()
        .iter()
        .filter(|e| e.elements >= limit_elements || e.bytes() > limit_bytes)
        .map(|e| e.to_string())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::MemoryCap {
            total: ledger.total_bytes(),
            cap: limit_bytes,
            offenders: offenders.join(", "),
        })
    }
}

fn audit_typed<T: Real>(mode: Mode, n: usize, dtype: Dtype) -> Result<MemoryAudit> {
    let run = run_once::<T>(mode, n)?;
    let ledger = run.ledger;
    let (total_cap, buffer_cap) = match mode {
        Mode::Fdh => {
            let cap = fdh_cap(n, T::BYTES);
            ledger.check_cap(cap)?;
            (Some(cap), None)
        }
        Mode::Loading => {
            check_loading(&ledger, n)?;
            (None, Some((n * n * 24) as u64))
        }
        Mode::Traditional => (None, None),
    };
    Ok(MemoryAudit {
        mode,
        n,
        dtype,
        total_cap,
        buffer_cap,
        ledger,
    })
}

/// Runs the pipeline once with accounting and enforces the mode's cap.
pub fn audit_memory(mode: Mode, n: usize, dtype: Dtype) -> Result<MemoryAudit> {
    match dtype {
        Dtype::F32 => audit_typed::<f32>(mode, n, dtype),
        Dtype::F64 => audit_typed::<f64>(mode, n, dtype),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data("slope fit needs at least two (x, y) pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Data("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("slope fit needs at least two distinct x values".into()));
    }
    Ok(sxy / sxx)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub modes: Vec<Mode>,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub dtype: Dtype,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Traditional-mode sizes whose histogram exceeds this many bytes are skipped.
    pub max_histogram_bytes: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            modes: vec![Mode::Fdh],
            sizes: vec![128, 256, 512, 1024],
            repeats: 5,
            dtype: Dtype::F32,
            threads: None,
            max_histogram_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub mode: Mode,
    pub stage: &'static str,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub ledger_bytes: u64,
    /// Ledger total without buffers whose size does not depend on N.
    pub ledger_core_bytes: u64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSlope {
    pub mode: Mode,
    pub stage: &'static str,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub threads: usize,
    pub repeats: usize,
    pub rows: Vec<ScalingRow>,
    pub time_slopes: Vec<ScalingSlope>,
    /// Slope of ledger core bytes against N, per mode.
    pub memory_slopes: Vec<(Mode, f64)>,
}

impl ScalingReport {
    pub fn time_slope(&self, mode: Mode, stage: &str) -> Option<f64> {
        self.time_slopes
            .iter()
            .find(|s| s.mode == mode && s.stage == stage)
            .map(|s| s.slope)
    }

    pub fn memory_slope(&self, mode: Mode) -> Option<f64> {
        self.memory_slopes.iter().find(|(m, _)| *m == mode).map(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mode,stage,median_seconds,mean_seconds,ledger_bytes,ledger_core_bytes,status\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.9},{},{},{}",
                r.n,
                r.mode,
                r.stage,
                r.median_seconds,
                r.mean_seconds,
                r.ledger_bytes,
                r.ledger_core_bytes,
                r.skipped
                    .as_deref()
                    .map_or("ok".to_string(), |why| format!("skipped: {why}"))
            );
        }
        out
    }

    pub fn slopes_csv(&self) -> String {
        let mut out = String::from("mode,stage,slope\n");
        for s in &self.time_slopes {
            let _ = writeln!(out, "{},{},{:.4}", s.mode, s.stage, s.slope);
        }
        for (m, s) in &self.memory_slopes {
            let _ = writeln!(out, "{m},ledger_bytes,{s:.4}");
        }
        out
    }
}

const STAGES: [&str; 4] = ["aggregate", "deconvolve", "extract", "reconstruct"];
const CONSTANT_BUFFERS: [&str; 1] = ["stream_io"];

fn stage_seconds(run: &PipelineRun, stage: &str) -> f64 {
    if stage == "reconstruct" {
        run.reconstruct_seconds()
    } else {
        run.seconds(stage).unwrap_or(0.0)
    }
}

fn measure<T: Real>(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        for &n in &cfg.sizes {
            if mode == Mode::Traditional {
                let (nt, _) = bench_time_axis(n);
                let bytes = (n * n * nt * 8) as u64;
                if bytes > cfg.max_histogram_bytes {
                    let why = format!("histogram needs {bytes} B > {} B", cfg.max_histogram_bytes);
                    rows.extend(STAGES.iter().map(|&stage| ScalingRow {
                        n,
                        mode,
                        stage,
                        median_seconds: f64::NAN,
                        mean_seconds: f64::NAN,
                        ledger_bytes: 0,
                        ledger_core_bytes: 0,
                        skipped: Some(why.clone()),
                    }));
                    continue;
                }
            }
            let mut times = vec![Vec::with_capacity(cfg.repeats); STAGES.len()];
            let mut ledger_bytes = 0;
            let mut core_bytes = 0;
            for _ in 0..cfg.repeats {
                let run = run_once::<T>(mode, n)?;
                for (t, stage) in times.iter_mut().zip(STAGES) {
                    t.push(stage_seconds(&run, stage));
                }
                ledger_bytes = run.ledger.total_bytes();
                core_bytes = run
                    .ledger
                    .entries()
                    .iter()
                    .filter(|e| !CONSTANT_BUFFERS.contains(&e.name.as_str()))
                    .map(|e| e.bytes())
                    .sum();
            }
            for (mut t, stage) in times.into_iter().zip(STAGES) {
                let mean = t.iter().sum::<f64>() / t.len() as f64;
                rows.push(ScalingRow {
                    n,
                    mode,
                    stage,
                    median_seconds: median(&mut t),
                    mean_seconds: mean,
                    ledger_bytes,
                    ledger_core_bytes: core_bytes,
                    skipped: None,
                });
            }
        }
    }
    Ok(rows)
}

fn slopes(rows: &[ScalingRow], modes: &[Mode]) -> (Vec<ScalingSlope>, Vec<(Mode, f64)>) {
    let mut time_slopes = Vec::new();
    let mut memory_slopes = Vec::new();
    for &mode in modes {
        for stage in STAGES {
            let pts: Vec<&ScalingRow> = rows
                .iter()
                .filter(|r| r.mode == mode && r.stage == stage && r.skipped.is_none())
                .collect();
            let xs: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.median_seconds).collect();
            if let Ok(slope) = fit_slope(&xs, &ys) {
                time_slopes.push(ScalingSlope { mode, stage, slope });
            }
            if stage == "reconstruct" {
                let bytes: Vec<f64> = pts.iter().map(|r| r.ledger_core_bytes as f64).collect();
                if let Ok(slope) = fit_slope(&xs, &bytes) {
                    memory_slopes.push((mode, slope));
                }
            }
        }
    }
    (time_slopes, memory_slopes)
}

/// Times every (mode, N) pair `repeats` times and fits log-log slopes.
pub fn run_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.repeats < 5 {
        return Err(Error::param(
            "repeats",
            format!("need at least 5 repeats, got {}", cfg.repeats),
        ));
    }
    if cfg.sizes.is_empty() || cfg.modes.is_empty() {
        return Err(Error::param("sizes", "need at least one mode and one size"));
    }
    if !cfg.sizes.windows(2).all(|w| w[0] < w[1]) || !cfg.sizes.iter().all(|n| n.is_power_of_two()) {
        return Err(Error::param("sizes", "sizes must be ascending powers of two"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::param("threads", e.to_string()))?;
    let threads = pool.current_num_threads();
    let rows = pool.install(|| match cfg.dtype {
        Dtype::F32 => measure::<f32>(cfg),
        Dtype::F64 => measure::<f64>(cfg),
    })?;
    let (time_slopes, memory_slopes) = slopes(&rows, &cfg.modes);
    Ok(ScalingReport {
        threads,
        repeats: cfg.repeats,
        rows,
        time_slopes,
        memory_slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_power_laws() {
        let xs = [128.0, 256.0, 512.0, 1024.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((fit_slope(&xs, &ys).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn slope_fit_on_n2_log_n() {
        // ln(N² ln N) = 2 ln N + ln ln N with ln N = L ln 2, L ∈ {7, 8, 9, 10}.
        // Slope = 2 + cov(L, ln L) / (ln 2 · var(L)) = 2 + 0.148476 / (0.693147 · 1.25) ≈ 2.1714.
        let xs = [128.0f64, 256.0, 512.0, 1024.0];
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x.ln()).collect();
        let fitted = fit_slope(&xs, &ys).unwrap();
        assert!((fitted - 2.1714).abs() < 1e-3, "{fitted}");
        // local slope 2 + 1/ln N at the geometric mid size
        let local = 2.0 + 1.0 / (128.0f64 * 1024.0).sqrt().ln();
        assert!((fitted - local).abs() < 0.05);
    }

    #[test]
    fn slope_fit_rejects_bad_input() {
        assert!(fit_slope(&[1.0], &[1.0]).is_err());
        assert!(fit_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(fit_slope(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn fdh_cap_scaling() {
        assert_eq!(fdh_cap(512, 4), 5 << 20);
        assert_eq!(fdh_cap(512, 8), 10 << 20);
        assert_eq!(fdh_cap(64, 4), 5 << 20);
        assert_eq!(fdh_cap(1024, 4), 20 << 20);
    }

    #[test]
    fn traditional_histogram_dominates_small_audit() {
        let audit = audit_memory(Mode::Traditional, 64, Dtype::F64).unwrap();
        let largest = audit.ledger.largest().unwrap();
        assert_eq!(largest.name, "histogram");
        assert_eq!(largest.bytes(), 64 * 64 * 64 * 8);
        assert_eq!(largest.bytes(), 2 << 20);
    }

    #[test]
    fn loading_audit_has_no_cube_buffer() {
        let audit = audit_memory(Mode::Loading, 32, Dtype::F64).unwrap();
        let max = audit.ledger.largest().unwrap();
        assert!(max.elements < 32 * 32 * 32);
        assert!(max.bytes() <= 32 * 32 * 24);
    }

    #[test]
    fn short_repeats_are_rejected() {
        let cfg = ScalingConfig {
            repeats: 3,
            ..ScalingConfig::default()
        };
        assert!(matches!(run_scaling(&cfg), Err(Error::Parameter { .. })));
    }

    #[test]
    fn oversize_traditional_rows_are_skipped() {
        let cfg = ScalingConfig {
            modes: vec![Mode::Traditional],
            sizes: vec![8, 16],
            repeats: 5,
            dtype: Dtype::F64,
            threads: Some(1),
            max_histogram_bytes: 8 * 8 * 8 * 8,
        };
        let report = run_scaling(&cfg).unwrap();
        assert!(report.rows.iter().filter(|r| r.n == 8).all(|r| r.skipped.is_none()));
        assert!(report.rows.iter().filter(|r| r.n == 16).all(|r| r.skipped.is_some()));
        assert!(report.to_csv().contains("skipped: histogram needs"));
    }
}
