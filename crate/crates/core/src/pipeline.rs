//! End-to-end reconstruction in the three memory regimes.
//!
//! | mode        | input                         | holds                         |
//! |-------------|-------------------------------|-------------------------------|
//! | traditional | full `[x][y][t]` histogram    | N²·nt histogram + two fields  |
//! | loading     | time-bin slices from a stream | one slice + two fields        |
//! | fdh         | photon events                 | two fields                    |
//!
//! Every run registers its buffers in a [`MemoryLedger`] and records wall-clock
//! time per stage.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::aggregate::{aggregate_stream_multi, aggregate_time_multi, BinSliceStream, EventAccumulator};
use crate::deconv::{check_chirp_sampling_with, DeconvOptions, Deconvolver, SamplingReport};
use crate::error::{Error, Result};
use crate::extract::{
    check_unambiguous_range, default_ds, extract_rows, DepthOptions, Estimator, PixelEstimate, RangeReport,
};
use crate::ledger::MemoryLedger;
use crate::model::{
    AggregatedField, Falloff, ModulatedAlbedo, PhotonEvent, Real, Reconstruction, TransientHistogram, WallGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Traditional,
    Loading,
    Fdh,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Traditional => "traditional",
            Mode::Loading => "loading",
            Mode::Fdh => "fdh",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traditional" => Ok(Mode::Traditional),
            "loading" => Ok(Mode::Loading),
            "fdh" => Ok(Mode::Fdh),
            other => Err(Error::param(
                "mode",
                format!("expected traditional, loading or fdh, got `{other}`"),
            )),
        }
    }
}

/// How Δs = s₂ − s₁ is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DsChoice {
    Explicit(f64),
    /// Default rule from a known maximum depth.
    FromMaxDepth(f64),
    /// Default rule from the largest path the input can represent.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub s: f64,
    pub ds: DsChoice,
    pub deconv: DeconvOptions,
    pub albedo_threshold: f64,
    pub estimator: Estimator,
}

impl PipelineConfig {
    pub fn new(s: f64) -> Self {
        PipelineConfig {
            s,
            ds: DsChoice::Auto,
            deconv: DeconvOptions::default(),
            albedo_threshold: 0.05,
            estimator: Estimator::PhaseRatio,
        }
    }

    /// Resolves Δs; `path_bound` is the largest round-trip path the input can hold.
    pub fn resolve_ds(&self, path_bound: Option<f64>) -> Result<(f64, f64)> {
        match self.ds {
            DsChoice::Explicit(ds) => {
                crate::model::check_positive("ds", ds)?;
                let max_depth = path_bound.map_or(f64::NAN, |p| 0.5 * p);
                Ok((ds, max_depth))
            }
            DsChoice::FromMaxDepth(d) => Ok((default_ds(self.s, d)?, d)),
            DsChoice::Auto => {
                let bound = path_bound.ok_or_else(|| {
                    Error::param("ds", "cannot derive ds without ds, max_depth or a bounded time axis")
                })?;
                let d = 0.5 * bound;
                Ok((default_ds(self.s, d)?, d))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

/// Everything a run reports besides the maps themselves.
#[derive(Debug)]
pub struct PipelineRun {
    pub mode: Mode,
    pub s1: f64,
    pub s2: f64,
    pub sampling: [SamplingReport; 2],
    /// Absent when no depth bound is known (explicit Δs on event input).
    pub range: Option<RangeReport>,
    pub timings: Vec<StageTiming>,
    pub ledger: MemoryLedger,
}

impl PipelineRun {
    pub fn seconds(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.stage == stage).map(|t| t.seconds)
    }

    /// Deconvolution plus extraction, the part that runs after acquisition.
    pub fn reconstruct_seconds(&self) -> f64 {
        self.seconds("deconvolve").unwrap_or(0.0) + self.seconds("extract").unwrap_or(0.0)
    }

    /// `stage,name,seconds` rows.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("stage,name,seconds\n");
        for (idx, t) in self.timings.iter().enumerate() {
            out.push_str(&format!("{},{},{:.9}\n", idx + 1, t.stage, t.seconds));
        }
        out
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub run: PipelineRun,
    pub reconstruction: Reconstruction,
}

struct Context {
    mode: Mode,
    grid: WallGrid,
    s1: f64,
    s2: f64,
    sampling: [SamplingReport; 2],
    range: Option<RangeReport>,
    depth: DepthOptions,
    timings: Vec<StageTiming>,
    ledger: MemoryLedger,
}

impl Context {
    fn new(mode: Mode, grid: &WallGrid, cfg: &PipelineConfig, path_bound: Option<f64>) -> Result<Self> {
        let (ds, max_depth) = cfg.resolve_ds(path_bound).map_err(Error::in_stage("setup"))?;
        let s1 = cfg.s;
        let s2 = s1 + ds;
        let setup = |r: Result<SamplingReport>| r.map_err(Error::in_stage("setup"));
        let sampling = [
            setup(check_chirp_sampling_with(grid, s1, &cfg.deconv))?,
            setup(check_chirp_sampling_with(grid, s2, &cfg.deconv))?,
        ];
        let range = if max_depth.is_finite() {
            Some(check_unambiguous_range(s1, s2, max_depth).map_err(Error::in_stage("setup"))?)
        } else {
            crate::extract::phase_rate(s1, s2).map_err(Error::in_stage("setup"))?;
            None
        };
        let depth = DepthOptions::new(ds, cfg.albedo_threshold, cfg.estimator).map_err(Error::in_stage("setup"))?;
        Ok(Context {
            mode,
            grid: *grid,
            s1,
            s2,
            sampling,
            range,
            depth,
            timings: Vec::new(),
            ledger: MemoryLedger::new(),
        })
    }

    fn timed<R>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let out = f(self).map_err(Error::in_stage(stage))?;
        self.timings.push(StageTiming {
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn register_fields<T: Real>(&self) {
        let n = self.grid.len();
        self.ledger.register("phi_s1", n, 2 * T::BYTES);
        self.ledger.register("phi_s2", n, 2 * T::BYTES);
    }

    /// Deconvolves both fields in place, one deconvolver alive at a time.
    fn deconvolve<T: Real>(
        &mut self,
        fields: Vec<AggregatedField<T>>,
        opts: &DeconvOptions,
    ) -> Result<[ModulatedAlbedo<T>; 2]> {
        self.timed("deconvolve", |ctx| {
            let mut out = Vec::with_capacity(2);
            for phi in fields {
                let mut dec = Deconvolver::<T>::new(&ctx.grid, phi.s(), opts)?;
                ctx.ledger.register_all(dec.buffers());
                out.push(dec.apply(phi)?);
            }
            let psi2 = out.pop().expect("two fields");
            let psi1 = out.pop().expect("two fields");
            Ok([psi1, psi2])
        })
    }

    fn extract_to<T: Real, F>(&mut self, psi: &[ModulatedAlbedo<T>; 2], sink: F) -> Result<()>
    where
        F: FnMut(usize, &[PixelEstimate]) -> Result<()>,
    {
        let depth = self.depth;
        self.ledger
            .register("extract_row", self.grid.ny(), std::mem::size_of::<PixelEstimate>());
        self.timed("extract", |_| extract_rows(&psi[0], &psi[1], &depth, sink))
    }

    fn extract_collect<T: Real>(&mut self, psi: &[ModulatedAlbedo<T>; 2]) -> Result<Reconstruction> {
        let n = self.grid.len();
        self.ledger.register("albedo_map", n, 8);
        self.ledger.register("depth_map", n, 8);
        self.ledger.register("valid_map", n, 1);
        let mut albedo = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        self.extract_to(psi, |_, row| {
            for p in row {
                albedo.push(p.albedo);
                depth.push(p.depth);
                valid.push(p.valid);
            }
            Ok(())
        })?;
        Reconstruction::new(self.grid, albedo, depth, valid)
    }

    fn into_run(self) -> PipelineRun {
        PipelineRun {
            mode: self.mode,
            s1: self.s1,
            s2: self.s2,
            sampling: self.sampling,
            range: self.range,
            timings: self.timings,
            ledger: self.ledger,
        }
    }
}

/// Traditional mode: the whole histogram is in memory.
pub fn reconstruct_histogram<T: Real>(hist: &TransientHistogram, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut ctx = Context::new(Mode::Traditional, hist.grid(), cfg, Some(hist.max_path()))?;
    ctx.ledger.register("histogram", hist.data().len(), 8);
    let s = [ctx.s1, ctx.s2];
    let fields = ctx.timed("aggregate", |_| aggregate_time_multi::<T>(hist, &s))?;
    ctx.register_fields::<T>();
    let psi = ctx.deconvolve(fields, &cfg.deconv)?;
    let reconstruction = ctx.extract_collect(&psi)?;
    Ok(PipelineOutput {
        run: ctx.into_run(),
        reconstruction,
    })
}

/// Loading mode: time-bin slices are consumed one at a time.
pub fn reconstruct_stream<T: Real, S: BinSliceStream + ?Sized>(
    stream: &mut S,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let grid = *stream.grid();
    let path_bound = stream.nt() as f64 * stream.bin_length();
    let mut ctx = Context::new(Mode::Loading, &grid, cfg, Some(path_bound))?;
    ctx.ledger.register("bin_slice", grid.len(), 8);
    ctx.ledger.register("stream_io", stream.buffer_bytes(), 1);
    let s = [ctx.s1, ctx.s2];
    let fields = ctx.timed("aggregate", |_| aggregate_stream_multi::<T, S>(stream, &s))?;
    ctx.register_fields::<T>();
    let psi = ctx.deconvolve(fields, &cfg.deconv)?;
    let reconstruction = ctx.extract_collect(&psi)?;
    Ok(PipelineOutput {
        run: ctx.into_run(),
        reconstruction,
    })
}

fn accumulate_events<T: Real, I>(ctx: &mut Context, falloff: Falloff, events: I) -> Result<Vec<AggregatedField<T>>>
where
    I: IntoIterator<Item = Result<PhotonEvent>>,
{
    let s = [ctx.s1, ctx.s2];
    let grid = ctx.grid;
    ctx.register_fields::<T>();
    ctx.timed("aggregate", |_| {
        let mut acc = EventAccumulator::<T>::new(grid, falloff, &s)?;
        for ev in events {
            acc.push(&ev?)?;
        }
        acc.finish()
    })
}

/// FDH mode with row-wise output: nothing of size N² is held besides the two fields.
///
/// `max_path_hint` (largest round-trip path) feeds the automatic Δs rule;
/// without it `cfg.ds` must be explicit or derived from a max depth.
pub fn reconstruct_events_rows<T: Real, I, F>(
    grid: &WallGrid,
    falloff: Falloff,
    events: I,
    cfg: &PipelineConfig,
    max_path_hint: Option<f64>,
    sink: F,
) -> Result<PipelineRun>
where
    I: IntoIterator<Item = Result<PhotonEvent>>,
    F: FnMut(usize, &[PixelEstimate]) -> Result<()>,
{
    let mut ctx = Context::new(Mode::Fdh, grid, cfg, max_path_hint)?;
    let fields = accumulate_events::<T, I>(&mut ctx, falloff, events)?;
    let psi = ctx.deconvolve(fields, &cfg.deconv)?;
    ctx.extract_to(&psi, sink)?;
    Ok(ctx.into_run())
}

/// FDH mode collecting full output maps.
pub fn reconstruct_events<T: Real, I>(
    grid: &WallGrid,
    falloff: Falloff,
    events: I,
    cfg: &PipelineConfig,
    max_path_hint: Option<f64>,
) -> Result<PipelineOutput>
where
    I: IntoIterator<Item = Result<PhotonEvent>>,
{
    let mut ctx = Context::new(Mode::Fdh, grid, cfg, max_path_hint)?;
    let fields = accumulate_events::<T, I>(&mut ctx, falloff, events)?;
    let psi = ctx.deconvolve(fields, &cfg.deconv)?;
    let reconstruction = ctx.extract_collect(&psi)?;
    Ok(PipelineOutput {
        run: ctx.into_run(),
        reconstruction,
    })
}

/// Runs deconvolution and extraction on precomputed fields φ(s₁), φ(s₂).
pub fn reconstruct_fields<T: Real>(
    phi1: AggregatedField<T>,
    phi2: AggregatedField<T>,
    cfg: &PipelineConfig,
    max_depth: Option<f64>,
) -> Result<PipelineOutput> {
    if !phi1.grid().same_geometry(phi2.grid()) {
        return Err(Error::Data("phi fields live on different grids".into()));
    }
    let ds = phi2.s() - phi1.s();
    let cfg = PipelineConfig {
        s: phi1.s(),
        ds: DsChoice::Explicit(ds),
        ..*cfg
    };
    let mut ctx = Context::new(Mode::Fdh, phi1.grid(), &cfg, max_depth.map(|d| 2.0 * d))?;
    ctx.register_fields::<T>();
    let psi = ctx.deconvolve(vec![phi1, phi2], &cfg.deconv)?;
    let reconstruction = ctx.extract_collect(&psi)?;
    Ok(PipelineOutput {
        run: ctx.into_run(),
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::HistogramSlices;
    use crate::forward::{render_events, render_histogram, RenderOptions};
    use crate::model::{SceneSurfels, Surfel};

    fn scene() -> SceneSurfels {
        vec![Surfel::new([0.0, 0.0, 0.5], 1.0).unwrap()].into_iter().collect()
    }

    #[test]
    fn ds_resolution() {
        let mut cfg = PipelineConfig::new(0.05);
        assert!(cfg.resolve_ds(None).is_err());
        let (ds, d) = cfg.resolve_ds(Some(2.0)).unwrap();
        assert_eq!(d, 1.0);
        assert!((ds - 2.0 * std::f64::consts::PI * 0.05f64.powi(3)).abs() < 1e-15);
        cfg.ds = DsChoice::Explicit(0.001);
        assert_eq!(cfg.resolve_ds(None).unwrap().0, 0.001);
        cfg.ds = DsChoice::Explicit(-0.001);
        assert!(matches!(cfg.resolve_ds(None), Err(Error::Parameter { .. })));
    }

    #[test]
    fn mode_parsing() {
        for m in [Mode::Traditional, Mode::Loading, Mode::Fdh] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn traditional_and_loading_agree_bitwise() {
        let grid = WallGrid::centered(16, 1.0 / 16.0).unwrap();
        let hist = render_histogram(
            &scene(),
            &grid,
            256,
            0.006,
            Falloff::Isotropic,
            &RenderOptions::default(),
        )
        .unwrap()
        .histogram;
        let cfg = PipelineConfig::new(0.05);
        let a = reconstruct_histogram::<f64>(&hist, &cfg).unwrap();
        let b = reconstruct_stream::<f64, _>(&mut HistogramSlices::new(&hist), &cfg).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.run.s2, b.run.s2);
        assert!(a.run.ledger.get("histogram").is_some());
        assert!(b.run.ledger.get("histogram").is_none());
    }

    #[test]
    fn stage_errors_are_prefixed() {
        let grid = WallGrid::centered(4, 0.1).unwrap();
        let hist = TransientHistogram::zeros(grid, 8, 0.01, Falloff::Isotropic).unwrap();
        let mut cfg = PipelineConfig::new(0.05);
        cfg.albedo_threshold = 2.0;
        let err = reconstruct_histogram::<f64>(&hist, &cfg).unwrap_err();
        assert!(err.to_string().starts_with("setup: "), "{err}");
        assert_eq!(err.kind(), crate::error::ErrorKind::Numerical);
    }

    #[test]
    fn fdh_rows_cover_grid() {
        let grid = WallGrid::centered(8, 1.0 / 8.0).unwrap();
        let events = render_events(&scene(), &grid, Falloff::Isotropic, 50.0, 1).unwrap();
        let cfg = PipelineConfig::new(0.05);
        let mut rows = Vec::new();
        let run = reconstruct_events_rows::<f32, _, _>(
            &grid,
            Falloff::Isotropic,
            events.events().iter().map(|e| Ok(*e)),
            &cfg,
            Some(2.0),
            |i, row| {
                assert_eq!(row.len(), 8);
                rows.push(i);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(rows, (0..8).collect::<Vec<_>>());
        assert_eq!(run.ledger.get("phi_s1").unwrap().bytes(), 64 * 8);
        assert!(run.ledger.get("albedo_map").is_none());
        assert!(run.seconds("aggregate").is_some());
        assert!(run.timing_csv().starts_with("stage,name,seconds\n1,aggregate,"));
    }
}
