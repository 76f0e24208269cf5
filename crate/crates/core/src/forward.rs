//! Confocal transient forward model for surfel scenes.
//!
//! [`render_histogram`] bins each surfel's return into the time axis,
//! [`render_phi_analytic`] evaluates the aggregated field in closed form, and
//! [`render_events`] draws individual photon detections for the
//! acquisition-time accumulation path.
//!
//! Deposit normalization: a surfel at distance `r` deposits
//! `a · (2 / bin_length) · r^{-k}` into the time axis. Multiplying by the
//! aggregation weight `(ρ/2)^k · (bin_length / 2)` at ρ = 2r gives back `a`,
//! so the histogram route and the closed form agree without any
//! scene-dependent constant.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    check_positive, AggregatedField, Falloff, PhotonEvent, PhotonEventList, SceneSurfels, TransientHistogram, WallGrid,
};

/// How a surfel's mass lands on the discrete time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Deposit {
    /// Everything into the bin containing the path.
    NearestBin,
    /// Split linearly between the two bins whose centers bracket the path.
    #[default]
    LinearSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Noise {
    #[default]
    None,
    /// Each bin becomes `Poisson(exposure_scale · value) / exposure_scale`.
    Poisson { exposure_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    pub deposit: Deposit,
    pub noise: Noise,
    pub rng_seed: u64,
}

/// Mass that fell beyond the last time bin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClipReport {
    pub clipped_deposits: u64,
    pub clipped_mass: f64,
}

impl ClipReport {
    fn merge(self, other: ClipReport) -> ClipReport {
        ClipReport {
            clipped_deposits: self.clipped_deposits + other.clipped_deposits,
            clipped_mass: self.clipped_mass + other.clipped_mass,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.clipped_deposits == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHistogram {
    pub histogram: TransientHistogram,
    pub clip: ClipReport,
}

fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(mean)
}

/// Renders the confocal transient histogram of a surfel scene.
///
/// Surfels whose round trip exceeds `nt · bin_length` are clipped and counted
/// in the returned [`ClipReport`].
pub fn render_histogram(
    scene: &SceneSurfels,
    grid: &WallGrid,
    nt: usize,
    bin_length: f64,
    falloff: Falloff,
    opts: &RenderOptions,
) -> Result<RenderedHistogram> {
    if nt == 0 {
        return Err(Error::param("nt", "must be >= 1"));
    }
    check_positive("bin_length", bin_length)?;
    if let Noise::Poisson { exposure_scale } = opts.noise {
        if !(exposure_scale.is_finite() && exposure_scale >= 0.0) {
            return Err(Error::param(
                "exposure_scale",
                format!("must be >= 0, got {exposure_scale}"),
            ));
        }
    }
    let k = falloff.exponent();
    let scale = 2.0 / bin_length;
    let mut data = vec![0.0; grid.len() * nt];

    let clip = data
        .par_chunks_mut(nt)
        .enumerate()
        .map(|(idx, bins)| {
            let [x, y] = grid.pixel_center(idx / grid.ny(), idx % grid.ny());
            let mut clip = ClipReport::default();
            for surfel in scene.surfels() {
                let r = surfel.distance_to_wall(x, y);
                let mass = surfel.albedo() * scale * r.powi(-k);
                let path = 2.0 * r;
                match opts.deposit {
                    Deposit::NearestBin => {
                        let n = (path / bin_length).floor() as usize;
                        if n < nt {
                            bins[n] += mass;
                        } else {
                            clip.clipped_deposits += 1;
                            clip.clipped_mass += mass;
                        }
                    }
                    Deposit::LinearSplit => {
                        let u = path / bin_length - 0.5;
                        if u <= 0.0 {
                            bins[0] += mass;
                            continue;
                        }
                        let lo = u.floor() as usize;
                        let frac = u - lo as f64;
                        if lo >= nt {
                            clip.clipped_deposits += 1;
                            clip.clipped_mass += mass;
                            continue;
                        }
                        bins[lo] += (1.0 - frac) * mass;
                        if lo + 1 < nt {
                            bins[lo + 1] += frac * mass;
                        } else if frac > 0.0 {
                            clip.clipped_deposits += 1;
                            clip.clipped_mass += frac * mass;
                        }
                    }
                }
            }
            if let Noise::Poisson { exposure_scale } = opts.noise {
                let mut rng = pixel_rng(opts.rng_seed, idx);
                for v in bins.iter_mut() {
                    *v = if exposure_scale > 0.0 {
                        poisson_draw(&mut rng, exposure_scale * *v) / exposure_scale
                    } else {
                        0.0
                    };
                }
            }
            clip
        })
        .reduce(ClipReport::default, ClipReport::merge);

    let histogram = TransientHistogram::new(*grid, nt, bin_length, falloff, data)?;
    Ok(RenderedHistogram { histogram, clip })
}

/// Renders time-bin slices on demand, bit-identical to the slices of
/// [`render_histogram`] without noise. Each slice recomputes every
/// (pixel, surfel) deposit, so no storage beyond the slice itself is needed.
#[derive(Debug, Clone)]
pub struct SceneSliceStream<'a> {
    scene: &'a SceneSurfels,
    grid: WallGrid,
    nt: usize,
    bin_length: f64,
    falloff: Falloff,
    deposit: Deposit,
    next: usize,
}

impl<'a> SceneSliceStream<'a> {
    pub fn new(
        scene: &'a SceneSurfels,
        grid: &WallGrid,
        nt: usize,
        bin_length: f64,
        falloff: Falloff,
        deposit: Deposit,
    ) -> Result<Self> {
        if nt == 0 {
            return Err(Error::param("nt", "must be >= 1"));
        }
        check_positive("bin_length", bin_length)?;
        Ok(SceneSliceStream {
            scene,
            grid: *grid,
            nt,
            bin_length,
            falloff,
            deposit,
            next: 0,
        })
    }
}

impl crate::aggregate::BinSliceStream for SceneSliceStream<'_> {
    fn grid(&self) -> &WallGrid {
        &self.grid
    }

    fn nt(&self) -> usize {
        self.nt
    }

    fn bin_length(&self) -> f64 {
        self.bin_length
    }

    fn falloff(&self) -> Falloff {
        self.falloff
    }

    fn next_slice(&mut self, slice: &mut Vec<f64>) -> Result<bool> {
        if self.next >= self.nt {
            return Ok(false);
        }
        let n = self.next;
        let (grid, bl, deposit) = (self.grid, self.bin_length, self.deposit);
        let k = self.falloff.exponent();
        let scale = 2.0 / bl;
        slice.clear();
        slice.resize(grid.len(), 0.0);
        slice.par_iter_mut().enumerate().for_each(|(idx, v)| {
            let [x, y] = grid.pixel_center(idx / grid.ny(), idx % grid.ny());
            for surfel in self.scene.surfels() {
                let r = surfel.distance_to_wall(x, y);
                let path = 2.0 * r;
                let (lo, lo_share, hi_share) = match deposit {
                    Deposit::NearestBin => ((path / bl).floor() as usize, None, None),
                    Deposit::LinearSplit => {
                        let u = path / bl - 0.5;
                        if u <= 0.0 {
                            (0, None, None)
                        } else {
                            let lo = u.floor() as usize;
                            let frac = u - lo as f64;
                            (lo, Some(1.0 - frac), Some(frac))
                        }
                    }
                };
                if lo != n && lo + 1 != n {
                    continue;
                }
                let mass = surfel.albedo() * scale * r.powi(-k);
                if lo == n {
                    *v += lo_share.map_or(mass, |f| f * mass);
                } else if let Some(f) = hi_share {
                    *v += f * mass;
                }
            }
        });
        self.next += 1;
        Ok(true)
    }
}

/// Closed-form aggregated field of a surfel scene:
/// `φ(x; s) = Σ_p a_p · exp(−i ‖(x,0) − p‖² / 4s²)`.
pub fn render_phi_analytic(
    scene: &SceneSurfels,
    grid: &WallGrid,
    s: f64,
    falloff: Falloff,
) -> Result<AggregatedField<f64>> {
    check_positive("s", s)?;
    let inv = 1.0 / (4.0 * s * s);
    let data: Vec<Complex<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [x, y] = grid.pixel_center(idx / grid.ny(), idx % grid.ny());
            scene.surfels().iter().fold(Complex::new(0.0, 0.0), |acc, p| {
                acc + Complex::from_polar(p.albedo(), -p.distance_sq_to_wall(x, y) * inv)
            })
        })
        .collect();
    AggregatedField::new(*grid, s, falloff, data)
}

/// Lazily generated Poisson photon events for a surfel scene.
///
/// The expected count for the pair (surfel p, pixel x) is
/// `mean · a_p · r^{-k} / max_pairs(a · r^{-k})`. Every pixel draws from its
/// own RNG stream, so the output is independent of iteration strategy.
#[derive(Debug, Clone)]
pub struct EventSynthesizer<'a> {
    scene: &'a SceneSurfels,
    grid: WallGrid,
    falloff: Falloff,
    mean: f64,
    normalizer: f64,
    seed: u64,
}

impl<'a> EventSynthesizer<'a> {
    pub fn new(scene: &'a SceneSurfels, grid: &WallGrid, falloff: Falloff, mean: f64, seed: u64) -> Result<Self> {
        if !(mean.is_finite() && mean >= 0.0) {
            return Err(Error::param("mean_photons", format!("must be >= 0, got {mean}")));
        }
        let k = falloff.exponent();
        let normalizer = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let [x, y] = grid.pixel_center(idx / grid.ny(), idx % grid.ny());
                scene
                    .surfels()
                    .iter()
                    .map(|p| p.albedo() * p.distance_to_wall(x, y).powi(-k))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        Ok(EventSynthesizer {
            scene,
            grid: *grid,
            falloff,
            mean,
            normalizer,
            seed,
        })
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn falloff(&self) -> Falloff {
        self.falloff
    }

    /// Appends the events of one pixel (row-major index) to `out`.
    pub fn pixel_events(&self, idx: usize, out: &mut Vec<PhotonEvent>) {
        if self.mean == 0.0 || self.normalizer == 0.0 {
            return;
        }
        let (i, j) = (idx / self.grid.ny(), idx % self.grid.ny());
        let [x, y] = self.grid.pixel_center(i, j);
        let k = self.falloff.exponent();
        let mut rng = pixel_rng(self.seed, idx);
        for p in self.scene.surfels() {
            let r = p.distance_to_wall(x, y);
            let expected = self.mean * p.albedo() * r.powi(-k) / self.normalizer;
            let count = poisson_draw(&mut rng, expected) as u64;
            for _ in 0..count {
                out.push(PhotonEvent {
                    pixel: (i as u32, j as u32),
                    tof_path: 2.0 * r,
                });
            }
        }
    }

    /// Streams all events in pixel order without materializing the list.
    pub fn iter(&self) -> impl Iterator<Item = PhotonEvent> + '_ {
        let mut buf = Vec::new();
        (0..self.grid.len()).flat_map(move |idx| {
            buf.clear();
            self.pixel_events(idx, &mut buf);
            std::mem::take(&mut buf)
        })
    }
}

/// Draws a complete photon event list; deterministic given `seed`.
pub fn render_events(
    scene: &SceneSurfels,
    grid: &WallGrid,
    falloff: Falloff,
    mean_photons_per_surfel_pixel: f64,
    seed: u64,
) -> Result<PhotonEventList> {
    let synth = EventSynthesizer::new(scene, grid, falloff, mean_photons_per_surfel_pixel, seed)?;
    let per_pixel: Vec<Vec<PhotonEvent>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut out = Vec::new();
            synth.pixel_events(idx, &mut out);
            out
        })
        .collect();
    PhotonEventList::new(*grid, falloff, per_pixel.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Surfel;

    fn one_pixel() -> WallGrid {
        WallGrid::new(1, 1, 0.01, [0.0, 0.0]).unwrap()
    }

    fn unit_surfel() -> SceneSurfels {
        SceneSurfels::new(vec![Surfel::new([0.0, 0.0, 1.0], 1.0).unwrap()])
    }

    #[test]
    fn nearest_bin_hand_example() {
        let opts = RenderOptions {
            deposit: Deposit::NearestBin,
            ..Default::default()
        };
        let out = render_histogram(&unit_surfel(), &one_pixel(), 400, 0.01, Falloff::Retroreflective, &opts).unwrap();
        let bins = out.histogram.pixel(0, 0);
        assert_eq!(bins[200], 200.0);
        assert_eq!(bins.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(out.clip.is_clean());
    }

    #[test]
    fn linear_split_conserves_mass() {
        let scene = SceneSurfels::new(vec![Surfel::new([0.0, 0.0, 0.7234], 1.0).unwrap()]);
        let out = render_histogram(
            &scene,
            &one_pixel(),
            400,
            0.01,
            Falloff::Isotropic,
            &RenderOptions::default(),
        )
        .unwrap();
        let total: f64 = out.histogram.data().iter().sum();
        let expected = 2.0 / 0.01 * 0.7234f64.powi(-4);
        assert!((total - expected).abs() < 1e-9 * expected);
        assert_eq!(out.histogram.data().iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn empty_scene_renders_zeros() {
        let grid = WallGrid::new(3, 3, 0.1, [0.0; 2]).unwrap();
        let out = render_histogram(
            &SceneSurfels::default(),
            &grid,
            16,
            0.1,
            Falloff::Isotropic,
            &RenderOptions::default(),
        )
        .unwrap();
        assert!(out.histogram.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_surfel_doubles_histogram() {
        let grid = WallGrid::new(4, 3, 0.1, [-0.2, -0.1]).unwrap();
        let single = unit_surfel();
        let double = single.union(&single);
        let opts = RenderOptions::default();
        let a = render_histogram(&single, &grid, 300, 0.01, Falloff::Isotropic, &opts).unwrap();
        let b = render_histogram(&double, &grid, 300, 0.01, Falloff::Isotropic, &opts).unwrap();
        for (x, y) in a.histogram.data().iter().zip(b.histogram.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn clipping_is_reported() {
        let out = render_histogram(
            &unit_surfel(),
            &one_pixel(),
            100,
            0.01,
            Falloff::Isotropic,
            &RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(out.clip.clipped_deposits, 1);
        assert!(out.histogram.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn poisson_noise_is_deterministic_and_unbiased() {
        let grid = WallGrid::new(2, 2, 0.1, [0.0; 2]).unwrap();
        let opts = RenderOptions {
            deposit: Deposit::NearestBin,
            noise: Noise::Poisson { exposure_scale: 1e4 },
            rng_seed: 9,
        };
        let a = render_histogram(&unit_surfel(), &grid, 400, 0.01, Falloff::Retroreflective, &opts).unwrap();
        let b = render_histogram(&unit_surfel(), &grid, 400, 0.01, Falloff::Retroreflective, &opts).unwrap();
        assert_eq!(a, b);
        let clean = render_histogram(
            &unit_surfel(),
            &grid,
            400,
            0.01,
            Falloff::Retroreflective,
            &RenderOptions {
                deposit: Deposit::NearestBin,
                ..Default::default()
            },
        )
        .unwrap();
        let noisy: f64 = a.histogram.data().iter().sum();
        let exact: f64 = clean.histogram.data().iter().sum();
        assert!((noisy - exact).abs() < 0.01 * exact);
    }

    #[test]
    fn analytic_phi_hand_values() {
        let grid = WallGrid::new(2, 1, 1.0, [0.0, 0.0]).unwrap();
        let phi = render_phi_analytic(&unit_surfel(), &grid, 0.5, Falloff::Retroreflective).unwrap();
        // pixel 0 sits directly above the surfel: ‖·‖² = z₀² = 1
        let z = phi.get(0, 0);
        assert!((z - Complex::from_polar(1.0, -1.0)).norm() < 1e-15);
        let z = phi.get(1, 0);
        assert!((z - Complex::from_polar(1.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn analytic_phi_scales_linearly() {
        let grid = WallGrid::new(3, 3, 0.05, [-0.05, -0.05]).unwrap();
        let scene = SceneSurfels::new(vec![Surfel::new([0.01, 0.02, 0.4], 0.8).unwrap()]);
        let scaled = SceneSurfels::new(vec![Surfel::new([0.01, 0.02, 0.4], 0.8 * 3.0).unwrap()]);
        let a = render_phi_analytic(&scene, &grid, 0.05, Falloff::Isotropic).unwrap();
        let b = render_phi_analytic(&scaled, &grid, 0.05, Falloff::Isotropic).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * 3.0 - y).norm() < 1e-14);
        }
    }

    #[test]
    fn events_zero_mean_is_empty() {
        let events = render_events(&unit_surfel(), &one_pixel(), Falloff::Isotropic, 0.0, 1).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn events_share_exact_path() {
        let events = render_events(&unit_surfel(), &one_pixel(), Falloff::Isotropic, 500.0, 3).unwrap();
        assert!(events.len() > 400);
        assert!(events.events().iter().all(|e| e.tof_path == 2.0));
    }

    #[test]
    fn event_counts_follow_falloff() {
        // pixels at distance 1 m and 2 m from the surfel; k = 2 → mean ratio 1/4
        let grid = WallGrid::new(2, 1, 3f64.sqrt(), [0.0, 0.0]).unwrap();
        let mut near = 0usize;
        let mut far = 0usize;
        for seed in 0..20 {
            let ev = render_events(&unit_surfel(), &grid, Falloff::Retroreflective, 4000.0, seed).unwrap();
            for e in ev.events() {
                if e.pixel.0 == 0 {
                    near += 1;
                } else {
                    far += 1;
                }
            }
        }
        let ratio = far as f64 / near as f64;
        assert!((ratio - 0.25).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn streamed_events_match_list() {
        let grid = WallGrid::new(3, 2, 0.2, [-0.2, 0.0]).unwrap();
        let scene = unit_surfel();
        let list = render_events(&scene, &grid, Falloff::Isotropic, 20.0, 5).unwrap();
        let synth = EventSynthesizer::new(&scene, &grid, Falloff::Isotropic, 20.0, 5).unwrap();
        let streamed: Vec<_> = synth.iter().collect();
        assert_eq!(streamed, list.events());
    }

    #[test]
    fn slice_stream_matches_rendered_histogram() {
        use crate::aggregate::{BinSliceStream, HistogramSlices};
        let grid = WallGrid::new(5, 4, 0.1, [-0.2, -0.15]).unwrap();
        let scene: SceneSurfels = vec![
            Surfel::new([0.0, 0.05, 0.3], 1.0).unwrap(),
            Surfel::new([0.1, -0.1, 0.31], 0.4).unwrap(),
        ]
        .into_iter()
        .collect();
        for deposit in [Deposit::NearestBin, Deposit::LinearSplit] {
            let opts = RenderOptions {
                deposit,
                ..Default::default()
            };
            let hist = render_histogram(&scene, &grid, 90, 0.01, Falloff::Isotropic, &opts)
                .unwrap()
                .histogram;
            let mut a = SceneSliceStream::new(&scene, &grid, 90, 0.01, Falloff::Isotropic, deposit).unwrap();
            let mut b = HistogramSlices::new(&hist);
            let (mut sa, mut sb) = (Vec::new(), Vec::new());
            while b.next_slice(&mut sb).unwrap() {
                assert!(a.next_slice(&mut sa).unwrap());
                assert_eq!(sa, sb);
            }
            assert!(!a.next_slice(&mut sa).unwrap());
        }
    }
}
