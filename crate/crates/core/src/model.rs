//! Domain types shared by every stage: wall geometry, transient measurements,
//! the complex 2-D fields produced along the way and the final maps.
//!
//! Time is carried as round-trip optical path length in meters throughout;
//! [`path_to_seconds`] and [`seconds_to_path`] convert at the boundary.

use std::fmt::Debug;

use num_complex::Complex;
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn speed_of_light() -> f64 {
    SPEED_OF_LIGHT
}

/// Converts a round-trip optical path (m) to time of flight (s).
pub fn path_to_seconds(path: f64) -> f64 {
    path / SPEED_OF_LIGHT
}

pub fn seconds_to_path(seconds: f64) -> f64 {
    seconds * SPEED_OF_LIGHT
}

/// Floating-point storage type for complex fields (`f32` or `f64`).
pub trait Real: rustfft::FftNum + Float + FromPrimitive + ToPrimitive + Default + Debug {
    /// Bytes per real scalar.
    const BYTES: usize;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

pub(crate) fn to_c64<T: Real>(z: Complex<T>) -> Complex<f64> {
    Complex::new(z.re.f64(), z.im.f64())
}

pub(crate) fn from_c64<T: Real>(z: Complex<f64>) -> Complex<T> {
    Complex::new(T::of(z.re), T::of(z.im))
}

/// Radiometric falloff exponent `k`: 4 for isotropic scatterers, 2 for retroreflectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Falloff {
    Retroreflective = 2,
    Isotropic = 4,
}

impl Falloff {
    pub fn exponent(self) -> i32 {
        self as i32
    }

    pub fn from_exponent(k: u32) -> Result<Self> {
        match k {
            2 => Ok(Falloff::Retroreflective),
            4 => Ok(Falloff::Isotropic),
            other => Err(Error::param(
                "k",
                format!("falloff exponent must be 2 or 4, got {other}"),
            )),
        }
    }
}

pub(crate) fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite and > 0, got {v}")))
    }
}

/// Planar relay-wall sampling grid at z = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallGrid {
    nx: usize,
    ny: usize,
    pitch: f64,
    origin: [f64; 2],
}

impl WallGrid {
    pub fn new(nx: usize, ny: usize, pitch: f64, origin: [f64; 2]) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::param("grid", format!("dimensions must be >= 1, got {nx}x{ny}")));
        }
        check_positive("pitch", pitch)?;
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::param("origin", "must be finite"));
        }
        Ok(WallGrid { nx, ny, pitch, origin })
    }

    /// Square `n`×`n` grid whose pixel `(n/2, n/2)` sits at the wall origin.
    pub fn centered(n: usize, pitch: f64) -> Result<Self> {
        let half = (n / 2) as f64 * pitch;
        WallGrid::new(n, n, pitch, [-half, -half])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major linear index, `i` along x (slow), `j` along y (fast).
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.pitch,
            self.origin[1] + j as f64 * self.pitch,
        ]
    }

    /// Nearest pixel to a wall position, if it lies within half a pitch of the grid.
    pub fn nearest_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin[0]) / self.pitch).round();
        let fj = ((y - self.origin[1]) / self.pitch).round();
        if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.ny as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    pub fn same_geometry(&self, other: &WallGrid) -> bool {
        self == other
    }
}

/// Confocal transient measurement τ(x, t), stored `[x][y][t]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientHistogram {
    grid: WallGrid,
    nt: usize,
    bin_length: f64,
    falloff: Falloff,
    data: Vec<f64>,
}

impl TransientHistogram {
    pub fn new(grid: WallGrid, nt: usize, bin_length: f64, falloff: Falloff, data: Vec<f64>) -> Result<Self> {
        if nt == 0 {
            return Err(Error::param("nt", "must be >= 1"));
        }
        check_positive("bin_length", bin_length)?;
        let expected = grid.len() * nt;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "histogram payload has {} values, grid {}x{}x{} needs {expected}",
                data.len(),
                grid.nx(),
                grid.ny(),
                nt
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data(format!(
                "histogram value {} at flat index {pos} is negative or non-finite",
                data[pos]
            )));
        }
        Ok(TransientHistogram {
            grid,
            nt,
            bin_length,
            falloff,
            data,
        })
    }

    pub fn zeros(grid: WallGrid, nt: usize, bin_length: f64, falloff: Falloff) -> Result<Self> {
        TransientHistogram::new(grid, nt, bin_length, falloff, vec![0.0; grid.len() * nt])
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn bin_length(&self) -> f64 {
        self.bin_length
    }

    /// Δt in seconds.
    pub fn bin_duration(&self) -> f64 {
        path_to_seconds(self.bin_length)
    }

    pub fn falloff(&self) -> Falloff {
        self.falloff
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Time profile of one wall pixel.
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = self.grid.index(i, j) * self.nt;
        &self.data[start..start + self.nt]
    }

    /// Round-trip path at the center of bin `n`.
    pub fn bin_center_path(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.bin_length
    }

    /// Largest round-trip path covered by the time axis.
    pub fn max_path(&self) -> f64 {
        self.nt as f64 * self.bin_length
    }
}

fn check_complex_finite<T: Real>(data: &[Complex<T>]) -> Result<()> {
    match data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
        None => Ok(()),
        Some(pos) => Err(Error::Data(format!("non-finite complex value at flat index {pos}"))),
    }
}

/// Aggregated field φ(x; s): the time-collapsed measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedField<T: Real = f64> {
    grid: WallGrid,
    s: f64,
    falloff: Falloff,
    data: Vec<Complex<T>>,
}

impl<T: Real> AggregatedField<T> {
    pub fn new(grid: WallGrid, s: f64, falloff: Falloff, data: Vec<Complex<T>>) -> Result<Self> {
        check_positive("s", s)?;
        if data.len() != grid.len() {
            return Err(Error::Data(format!(
                "field has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        check_complex_finite(&data)?;
        Ok(AggregatedField { grid, s, falloff, data })
    }

    pub fn zeros(grid: WallGrid, s: f64, falloff: Falloff) -> Result<Self> {
        AggregatedField::new(grid, s, falloff, vec![Complex::default(); grid.len()])
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn falloff(&self) -> Falloff {
        self.falloff
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.data[self.grid.index(i, j)]
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }
}

/// Modulated albedo ψ(x; s) = a(x)·exp(−i d(x)²/4s²).
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedAlbedo<T: Real = f64> {
    grid: WallGrid,
    s: f64,
    data: Vec<Complex<T>>,
}

impl<T: Real> ModulatedAlbedo<T> {
    pub fn new(grid: WallGrid, s: f64, data: Vec<Complex<T>>) -> Result<Self> {
        check_positive("s", s)?;
        if data.len() != grid.len() {
            return Err(Error::Data(format!(
                "field has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        check_complex_finite(&data)?;
        Ok(ModulatedAlbedo { grid, s, data })
    }

    /// Builds ψ directly from albedo and depth maps.
    pub fn from_albedo_depth(grid: WallGrid, s: f64, albedo: &[f64], depth: &[f64]) -> Result<Self> {
        if albedo.len() != grid.len() || depth.len() != grid.len() {
            return Err(Error::Data("albedo/depth maps do not match grid".into()));
        }
        let data = albedo
            .iter()
            .zip(depth)
            .map(|(&a, &d)| from_c64(Complex::from_polar(a, -d * d / (4.0 * s * s))))
            .collect();
        ModulatedAlbedo::new(grid, s, data)
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.data[self.grid.index(i, j)]
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }
}

/// Albedo and depth maps with their validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub grid: WallGrid,
    pub albedo: Vec<f64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Reconstruction {
    pub fn new(grid: WallGrid, albedo: Vec<f64>, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = grid.len();
        if albedo.len() != n || depth.len() != n || valid.len() != n {
            return Err(Error::Data("reconstruction maps do not match grid".into()));
        }
        if albedo.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Data("albedo must be finite and >= 0".into()));
        }
        if depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Data("depth must be finite and >= 0".into()));
        }
        Ok(Reconstruction {
            grid,
            albedo,
            depth,
            valid,
        })
    }

    /// Pixel with the largest albedo (first in row-major order on ties).
    pub fn albedo_peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (idx, &a) in self.albedo.iter().enumerate() {
            if a > self.albedo[best] {
                best = idx;
            }
        }
        (best / self.grid.ny(), best % self.grid.ny())
    }

    pub fn albedo_at(&self, i: usize, j: usize) -> f64 {
        self.albedo[self.grid.index(i, j)]
    }

    pub fn depth_at(&self, i: usize, j: usize) -> f64 {
        self.depth[self.grid.index(i, j)]
    }

    pub fn valid_at(&self, i: usize, j: usize) -> bool {
        self.valid[self.grid.index(i, j)]
    }
}

/// Point sample of the hidden surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    position: [f64; 3],
    albedo: f64,
}

impl Surfel {
    pub fn new(position: [f64; 3], albedo: f64) -> Result<Self> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::param("surfel", "position must be finite"));
        }
        if position[2] <= 0.0 {
            return Err(Error::param(
                "surfel",
                format!("z must be > 0 (hidden half-space), got {}", position[2]),
            ));
        }
        if !(albedo.is_finite() && albedo >= 0.0) {
            return Err(Error::param("surfel", format!("albedo must be >= 0, got {albedo}")));
        }
        Ok(Surfel { position, albedo })
    }

    pub fn position(&self) -> [f64; 3] {
        self.position
    }

    pub fn albedo(&self) -> f64 {
        self.albedo
    }

    /// Distance to the wall point `(x, y, 0)`.
    pub fn distance_to_wall(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.position[0];
        let dy = y - self.position[1];
        let dz = self.position[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub(crate) fn distance_sq_to_wall(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.position[0];
        let dy = y - self.position[1];
        let dz = self.position[2];
        dx * dx + dy * dy + dz * dz
    }
}

/// Hidden scene as a list of weighted point scatterers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneSurfels {
    surfels: Vec<Surfel>,
}

impl SceneSurfels {
    pub fn new(surfels: Vec<Surfel>) -> Self {
        SceneSurfels { surfels }
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn push(&mut self, surfel: Surfel) {
        self.surfels.push(surfel);
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn union(&self, other: &SceneSurfels) -> SceneSurfels {
        let mut surfels = self.surfels.clone();
        surfels.extend_from_slice(&other.surfels);
        SceneSurfels { surfels }
    }
}

impl FromIterator<Surfel> for SceneSurfels {
    fn from_iter<I: IntoIterator<Item = Surfel>>(iter: I) -> Self {
        SceneSurfels::new(iter.into_iter().collect())
    }
}

/// A single detected photon: wall pixel plus round-trip path c·T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonEvent {
    pub pixel: (u32, u32),
    pub tof_path: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotonEventList {
    grid: WallGrid,
    falloff: Falloff,
    events: Vec<PhotonEvent>,
}

impl PhotonEventList {
    pub fn new(grid: WallGrid, falloff: Falloff, events: Vec<PhotonEvent>) -> Result<Self> {
        for (idx, ev) in events.iter().enumerate() {
            check_event(&grid, idx, ev)?;
        }
        Ok(PhotonEventList { grid, falloff, events })
    }

    pub fn grid(&self) -> &WallGrid {
        &self.grid
    }

    pub fn falloff(&self) -> Falloff {
        self.falloff
    }

    pub fn events(&self) -> &[PhotonEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub(crate) fn check_event(grid: &WallGrid, idx: usize, ev: &PhotonEvent) -> Result<()> {
    let (i, j) = ev.pixel;
    if i as usize >= grid.nx() || j as usize >= grid.ny() {
        return Err(Error::Data(format!(
            "event {idx}: pixel ({i}, {j}) outside {}x{} grid",
            grid.nx(),
            grid.ny()
        )));
    }
    if !(ev.tof_path.is_finite() && ev.tof_path > 0.0) {
        return Err(Error::Data(format!(
            "event {idx}: tof_path must be finite and > 0, got {}",
            ev.tof_path
        )));
    }
    Ok(())
}
