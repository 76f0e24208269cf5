use qfnlos::extract::default_ds;
use qfnlos::forward::{render_events, render_histogram, RenderOptions};
use qfnlos::io::{
    open_bin_stream, read_histogram, transpose_histogram_file, write_events, write_histogram, EventFileReader,
};
use qfnlos::pipeline::{reconstruct_events, reconstruct_histogram, reconstruct_stream, DsChoice, PipelineConfig};
use qfnlos::{Falloff, SceneSurfels, Surfel, WallGrid};

fn point(z: f64) -> SceneSurfels {
    vec![Surfel::new([0.0, 0.0, z], 1.0).unwrap()].into_iter().collect()
}

fn config(max_depth: f64) -> PipelineConfig {
    PipelineConfig {
        ds: DsChoice::FromMaxDepth(max_depth),
        ..PipelineConfig::new(0.05)
    }
}

#[test]
fn rendered_point_scatterer_is_localized() {
    let grid = WallGrid::centered(64, 1.0 / 64.0).unwrap();
    let z = 0.5;
    let hist = render_histogram(
        &point(z),
        &grid,
        800,
        0.002,
        Falloff::Isotropic,
        &RenderOptions::default(),
    )
    .unwrap()
    .histogram;
    let out = reconstruct_histogram::<f64>(&hist, &config(1.0)).unwrap();
    let rec = &out.reconstruction;
    let peak = rec.albedo_peak();
    assert_eq!(peak, (32, 32));
    assert!(rec.valid_at(32, 32));
    assert!(
        (rec.depth_at(32, 32) - z).abs() <= grid.pitch(),
        "{}",
        rec.depth_at(32, 32)
    );
    assert!(out.run.sampling.iter().all(|r| r.is_ok()));
    assert!(out.run.range.unwrap().is_ok());
}

#[test]
fn transposed_file_streams_to_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("h0.bin");
    let streamable = dir.path().join("h1.bin");
    let grid = WallGrid::centered(24, 1.0 / 24.0).unwrap();
    let hist = render_histogram(
        &point(0.4),
        &grid,
        300,
        0.004,
        Falloff::Retroreflective,
        &RenderOptions::default(),
    )
    .unwrap()
    .histogram;
    write_histogram(&raw, &hist).unwrap();
    transpose_histogram_file(&raw, &streamable).unwrap();
    let cfg = PipelineConfig::new(0.05);
    let batch = reconstruct_histogram::<f64>(&read_histogram(&raw).unwrap(), &cfg).unwrap();
    let streamed = reconstruct_stream::<f64, _>(&mut open_bin_stream(&streamable).unwrap(), &cfg).unwrap();
    assert_eq!(batch.reconstruction, streamed.reconstruction);
    assert_eq!(batch.run.s2, streamed.run.s2);
}

#[test]
fn events_from_file_localize_the_scatterer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    let grid = WallGrid::centered(32, 1.0 / 32.0).unwrap();
    let z = 0.6;
    let events = render_events(&point(z), &grid, Falloff::Isotropic, 200.0, 11).unwrap();
    write_events(&path, &events).unwrap();
    let reader = EventFileReader::open(&path).unwrap();
    let out = reconstruct_events::<f64, _>(&grid, Falloff::Isotropic, reader, &config(1.0), None).unwrap();
    let rec = &out.reconstruction;
    assert_eq!(rec.albedo_peak(), (16, 16));
    assert!((rec.depth_at(16, 16) - z).abs() <= grid.pitch());
    assert!((out.run.s2 - out.run.s1 - default_ds(0.05, 1.0).unwrap()).abs() < 1e-15);
}

#[test]
fn single_precision_tracks_double_precision() {
    let grid = WallGrid::centered(32, 1.0 / 32.0).unwrap();
    let hist = render_histogram(
        &point(0.5),
        &grid,
        600,
        0.003,
        Falloff::Isotropic,
        &RenderOptions::default(),
    )
    .unwrap()
    .histogram;
    let cfg = config(1.0);
    let a = reconstruct_histogram::<f64>(&hist, &cfg).unwrap().reconstruction;
    let b = reconstruct_histogram::<f32>(&hist, &cfg).unwrap().reconstruction;
    assert_eq!(a.albedo_peak(), b.albedo_peak());
    let (i, j) = a.albedo_peak();
    assert!((a.albedo_at(i, j) - b.albedo_at(i, j)).abs() <= 1e-4 * a.albedo_at(i, j));
    assert!((a.depth_at(i, j) - b.depth_at(i, j)).abs() <= 1e-3);
}

#[test]
fn explicit_ds_without_bound_on_events() {
    let grid = WallGrid::centered(8, 1.0 / 8.0).unwrap();
    let events = render_events(&point(0.5), &grid, Falloff::Isotropic, 20.0, 1).unwrap();
    let iter = || events.events().iter().map(|e| Ok(*e));
    let auto = reconstruct_events::<f64, _>(&grid, Falloff::Isotropic, iter(), &PipelineConfig::new(0.05), None);
    assert!(auto.unwrap_err().to_string().contains("ds"));
    let cfg = PipelineConfig {
        ds: DsChoice::Explicit(1e-3),
        ..PipelineConfig::new(0.05)
    };
    let out = reconstruct_events::<f64, _>(&grid, Falloff::Isotropic, iter(), &cfg, None).unwrap();
    assert!(out.run.range.is_none());
    assert_eq!(out.run.s2, 0.05 + 1e-3);
}
