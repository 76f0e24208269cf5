//! Results extraction: albedo and depth from ψ at two nearby `s` values.
//!
//! With ψ(s) = a·exp(−i d²/4s²), the ratio of two fields is
//! ψ(s₁)/ψ(s₂) = exp(−i d²·β), β = 1/4s₁² − 1/4s₂², so d² is read off the
//! phase of the ratio modulo the unambiguous range 2π/β.

use std::f64::consts::PI;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::{check_positive, to_c64, ModulatedAlbedo, Real, Reconstruction, WallGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Phase of ψ₁/ψ₂, mapped to [0, 2π).
    #[default]
    PhaseRatio,
    /// Central difference of ψ in `s` plugged into `(−2i s³ ψ⁻¹ ∂ψ/∂s)^{1/2}`.
    /// Only accurate while d²·β ≪ 1.
    Derivative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthOptions {
    ds: f64,
    albedo_rel_threshold: f64,
    estimator: Estimator,
}

impl DepthOptions {
    pub fn new(ds: f64, albedo_rel_threshold: f64, estimator: Estimator) -> Result<Self> {
        check_positive("ds", ds)?;
        if !(albedo_rel_threshold > 0.0 && albedo_rel_threshold < 1.0) {
            return Err(Error::param(
                "albedo_threshold",
                format!("must lie in (0, 1), got {albedo_rel_threshold}"),
            ));
        }
        Ok(DepthOptions {
            ds,
            albedo_rel_threshold,
            estimator,
        })
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn albedo_rel_threshold(&self) -> f64 {
        self.albedo_rel_threshold
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }
}

/// Largest Δs with `d_max² · Δs / 2s³ ≤ π`, i.e. half the unambiguous range.
pub fn default_ds(s1: f64, max_depth: f64) -> Result<f64> {
    check_positive("s", s1)?;
    check_positive("max_depth", max_depth)?;
    Ok(2.0 * PI * s1.powi(3) / (max_depth * max_depth))
}

/// β = 1/4s₁² − 1/4s₂².
pub fn phase_rate(s1: f64, s2: f64) -> Result<f64> {
    check_positive("s1", s1)?;
    check_positive("s2", s2)?;
    if s2 <= s1 {
        return Err(Error::param("s2", format!("need s2 > s1, got s1 = {s1}, s2 = {s2}")));
    }
    Ok(1.0 / (4.0 * s1 * s1) - 1.0 / (4.0 * s2 * s2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeReport {
    pub beta: f64,
    /// Depth at which the phase ratio wraps: √(2π/β).
    pub unambiguous_depth: f64,
    pub max_depth: f64,
}

impl RangeReport {
    pub fn is_ok(&self) -> bool {
        self.max_depth * self.max_depth * self.beta < 2.0 * PI
    }
}

pub fn check_unambiguous_range(s1: f64, s2: f64, max_depth: f64) -> Result<RangeReport> {
    let beta = phase_rate(s1, s2)?;
    check_positive("max_depth", max_depth)?;
    Ok(RangeReport {
        beta,
        unambiguous_depth: (2.0 * PI / beta).sqrt(),
        max_depth,
    })
}

/// Per-pixel modulus of ψ.
pub fn extract_albedo<T: Real>(psi: &ModulatedAlbedo<T>) -> Vec<f64> {
    psi.data().iter().map(|&z| to_c64(z).norm()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelEstimate {
    pub albedo: f64,
    pub depth: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

struct DepthSolver {
    s1: f64,
    s2: f64,
    beta: f64,
    cutoff: f64,
    estimator: Estimator,
}

impl DepthSolver {
    fn pixel(&self, p1: Complex<f64>, p2: Complex<f64>) -> PixelEstimate {
        let albedo = p1.norm();
        if albedo < self.cutoff || albedo == 0.0 || p2.norm() == 0.0 {
            return PixelEstimate {
                albedo,
                depth: 0.0,
                valid: false,
            };
        }
        let d2 = match self.estimator {
            Estimator::PhaseRatio => {
                let theta = (-(p1 * p2.conj()).arg()).rem_euclid(2.0 * PI);
                theta / self.beta
            }
            Estimator::Derivative => {
                let ds = self.s2 - self.s1;
                let s_mid = 0.5 * (self.s1 + self.s2);
                let mean = (p1 + p2) * 0.5;
                let slope = (p2 - p1) / ds;
                let v = Complex::new(0.0, -2.0 * s_mid.powi(3)) * slope / mean;
                v.re.max(0.0)
            }
        };
        PixelEstimate {
            albedo,
            depth: d2.sqrt(),
            valid: true,
        }
    }
}

fn solver<T: Real>(psi1: &ModulatedAlbedo<T>, psi2: &ModulatedAlbedo<T>, opts: &DepthOptions) -> Result<DepthSolver> {
    let beta = phase_rate(psi1.s(), psi2.s())?;
    if !psi1.grid().same_geometry(psi2.grid()) {
        return Err(Error::Data("psi fields live on different grids".into()));
    }
    let max_abs = psi1.data().iter().map(|&z| to_c64(z).norm()).fold(0.0, f64::max);
    Ok(DepthSolver {
        s1: psi1.s(),
        s2: psi2.s(),
        beta,
        cutoff: opts.albedo_rel_threshold * max_abs,
        estimator: opts.estimator,
    })
}

/// Streams albedo/depth/validity one grid row (`i` fixed) at a time.
///
/// Only one row of estimates is held, so callers can write results out
/// without allocating full output maps.
pub fn extract_rows<T: Real, F>(
    psi1: &ModulatedAlbedo<T>,
    psi2: &ModulatedAlbedo<T>,
    opts: &DepthOptions,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(usize, &[PixelEstimate]) -> Result<()>,
{
    let solver = solver(psi1, psi2, opts)?;
    let ny = psi1.grid().ny();
    let mut row = vec![PixelEstimate::default(); ny];
    for (i, (r1, r2)) in psi1
        .data()
        .chunks_exact(ny)
        .zip(psi2.data().chunks_exact(ny))
        .enumerate()
    {
        for (out, (&a, &b)) in row.iter_mut().zip(r1.iter().zip(r2)) {
            *out = solver.pixel(to_c64(a), to_c64(b));
        }
        sink(i, &row)?;
    }
    Ok(())
}

/// Depth map and validity mask from two fields at s₁ < s₂.
pub fn extract_depth<T: Real>(
    psi1: &ModulatedAlbedo<T>,
    psi2: &ModulatedAlbedo<T>,
    opts: &DepthOptions,
) -> Result<DepthMap> {
    let mut depth = Vec::with_capacity(psi1.data().len());
    let mut valid = Vec::with_capacity(psi1.data().len());
    extract_rows(psi1, psi2, opts, |_, row| {
        depth.extend(row.iter().map(|p| p.depth));
        valid.extend(row.iter().map(|p| p.valid));
        Ok(())
    })?;
    Ok(DepthMap { depth, valid })
}

/// Full reconstruction: albedo from ψ₁, depth and mask from the pair.
pub fn extract<T: Real>(
    psi1: &ModulatedAlbedo<T>,
    psi2: &ModulatedAlbedo<T>,
    opts: &DepthOptions,
) -> Result<Reconstruction> {
    let DepthMap { depth, valid } = extract_depth(psi1, psi2, opts)?;
    Reconstruction::new(*psi1.grid(), extract_albedo(psi1), depth, valid)
}

fn fft2_in_place(data: &mut [Complex<f64>], nx: usize, ny: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(ny), planner.plan_fft_inverse(nx))
    } else {
        (planner.plan_fft_forward(ny), planner.plan_fft_forward(nx))
    };
    for row in data.chunks_exact_mut(ny) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); nx];
    for j in 0..ny {
        for i in 0..nx {
            col[i] = data[i * ny + j];
        }
        col_fft.process(&mut col);
        for i in 0..nx {
            data[i * ny + j] = col[i];
        }
    }
}

/// Frequency-domain Wiener attenuation of an albedo map.
///
/// The signal spectrum `P` is the periodogram `|F|²/n` averaged over a 3×3
/// neighborhood of frequencies; the noise floor is
/// `noise_power_ratio · mean(albedo²)`. Each frequency is scaled by
/// `P / (P + noise)`, except DC which passes unchanged.
pub fn wiener_post_filter(albedo: &[f64], grid: &WallGrid, noise_power_ratio: f64) -> Result<Vec<f64>> {
    if albedo.len() != grid.len() {
        return Err(Error::Data("albedo map does not match grid".into()));
    }
    if !(noise_power_ratio.is_finite() && noise_power_ratio >= 0.0) {
        return Err(Error::param(
            "noise_power_ratio",
            format!("must be >= 0, got {noise_power_ratio}"),
        ));
    }
    if noise_power_ratio == 0.0 {
        return Ok(albedo.to_vec());
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let n = albedo.len() as f64;
    let mut spec: Vec<Complex<f64>> = albedo.iter().map(|&a| Complex::new(a, 0.0)).collect();
    fft2_in_place(&mut spec, nx, ny, false);

    let periodogram: Vec<f64> = spec.iter().map(|z| z.norm_sqr() / n).collect();
    let noise = noise_power_ratio * albedo.iter().map(|a| a * a).sum::<f64>() / n;
    for i in 0..nx {
        for j in 0..ny {
            if i == 0 && j == 0 {
                continue;
            }
            let mut p = 0.0;
            for di in [nx - 1, 0, 1] {
                for dj in [ny - 1, 0, 1] {
                    p += periodogram[((i + di) % nx) * ny + (j + dj) % ny];
                }
            }
            p /= 9.0;
            let gain = if p + noise > 0.0 { p / (p + noise) } else { 0.0 };
            spec[i * ny + j] *= gain;
        }
    }
    fft2_in_place(&mut spec, nx, ny, true);
    Ok(spec.iter().map(|z| z.re / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn opts(estimator: Estimator) -> DepthOptions {
        DepthOptions::new(0.001, 0.1, estimator).unwrap()
    }

    fn pair(a: f64, d: f64, s1: f64, s2: f64) -> (ModulatedAlbedo, ModulatedAlbedo) {
        let grid = WallGrid::new(1, 1, 0.01, [0.0; 2]).unwrap();
        (
            ModulatedAlbedo::from_albedo_depth(grid, s1, &[a], &[d]).unwrap(),
            ModulatedAlbedo::from_albedo_depth(grid, s2, &[a], &[d]).unwrap(),
        )
    }

    #[test]
    fn albedo_is_modulus() {
        let grid = WallGrid::new(2, 2, 0.01, [0.0; 2]).unwrap();
        let zero = ModulatedAlbedo::<f64>::new(grid, 0.1, vec![Complex::new(0.0, 0.0); 4]).unwrap();
        assert!(extract_albedo(&zero).iter().all(|a| *a == 0.0));
        let psi = ModulatedAlbedo::<f64>::from_albedo_depth(grid, 0.05, &[2.5; 4], &[0.1, 0.7, 1.3, 2.2]).unwrap();
        for a in extract_albedo(&psi) {
            assert!((a - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn phase_ratio_inverts_construction() {
        let (p1, p2) = pair(1.0, 1.0, 0.05, 0.051);
        let rec = extract(&p1, &p2, &opts(Estimator::PhaseRatio)).unwrap();
        assert!((rec.depth[0] - 1.0).abs() <= 1e-12);
        assert!(rec.valid[0]);
    }

    #[test]
    fn zero_depth_gives_zero() {
        let (p1, p2) = pair(1.0, 0.0, 0.05, 0.051);
        let map = extract_depth(&p1, &p2, &opts(Estimator::PhaseRatio)).unwrap();
        assert_eq!(map.depth[0], 0.0);
    }

    #[test]
    fn rejects_unordered_s_and_grid_mismatch() {
        let (p1, p2) = pair(1.0, 0.3, 0.05, 0.051);
        assert!(matches!(
            extract_depth(&p2, &p1, &opts(Estimator::PhaseRatio)),
            Err(Error::Parameter { .. })
        ));
        let other = WallGrid::new(1, 1, 0.02, [0.0; 2]).unwrap();
        let p3 = ModulatedAlbedo::from_albedo_depth(other, 0.051, &[1.0], &[0.3]).unwrap();
        assert!(matches!(
            extract_depth(&p1, &p3, &opts(Estimator::PhaseRatio)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn estimators_agree_in_small_phase_regime() {
        let (s1, s2) = (0.05, 0.0505);
        let beta = phase_rate(s1, s2).unwrap();
        for frac in [0.01, 0.03, 0.06, 0.1] {
            let d = (frac / beta).sqrt();
            let (p1, p2) = pair(0.7, d, s1, s2);
            let a = extract_depth(&p1, &p2, &opts(Estimator::PhaseRatio)).unwrap().depth[0];
            let b = extract_depth(&p1, &p2, &opts(Estimator::Derivative)).unwrap().depth[0];
            assert!((a - b).abs() <= 0.01 * a, "d²β={frac}: {a} vs {b}");
        }
    }

    #[test]
    fn global_phase_and_scale_invariance() {
        let grid = WallGrid::new(3, 1, 0.01, [0.0; 2]).unwrap();
        let a = [0.5, 1.0, 2.0];
        let d = [0.2, 0.45, 0.9];
        let p1 = ModulatedAlbedo::<f64>::from_albedo_depth(grid, 0.05, &a, &d).unwrap();
        let p2 = ModulatedAlbedo::<f64>::from_albedo_depth(grid, 0.0502, &a, &d).unwrap();
        let base = extract(&p1, &p2, &opts(Estimator::PhaseRatio)).unwrap();
        let rot = |p: &ModulatedAlbedo, u: Complex<f64>| {
            ModulatedAlbedo::new(*p.grid(), p.s(), p.data().iter().map(|z| z * u).collect()).unwrap()
        };
        for u in [Complex::new(0.0, 1.0), Complex::new(-1.0, 0.0), Complex::new(0.0, -1.0)] {
            let r = extract(&rot(&p1, u), &rot(&p2, u), &opts(Estimator::PhaseRatio)).unwrap();
            assert_eq!(r.depth, base.depth);
        }
        let u = Complex::from_polar(1.0, 0.731);
        let r = extract(&rot(&p1, u), &rot(&p2, u), &opts(Estimator::PhaseRatio)).unwrap();
        for (x, y) in r.depth.iter().zip(&base.depth) {
            assert!((x - y).abs() < 1e-12);
        }
        let r = extract(
            &rot(&p1, Complex::new(4.0, 0.0)),
            &rot(&p2, Complex::new(4.0, 0.0)),
            &opts(Estimator::PhaseRatio),
        )
        .unwrap();
        assert_eq!(r.depth, base.depth);
        for (x, y) in r.albedo.iter().zip(&base.albedo) {
            assert_eq!(*x, 4.0 * y);
        }
    }

    #[test]
    fn mask_follows_threshold() {
        let grid = WallGrid::new(4, 1, 0.01, [0.0; 2]).unwrap();
        let a = [1.0, 0.5, 0.05, 0.0];
        let p1 = ModulatedAlbedo::<f64>::from_albedo_depth(grid, 0.05, &a, &[0.3; 4]).unwrap();
        let p2 = ModulatedAlbedo::<f64>::from_albedo_depth(grid, 0.0502, &a, &[0.3; 4]).unwrap();
        let map = extract_depth(
            &p1,
            &p2,
            &DepthOptions::new(0.0002, 0.1, Estimator::PhaseRatio).unwrap(),
        )
        .unwrap();
        assert_eq!(map.valid, vec![true, true, false, false]);
        assert_eq!(map.depth[2], 0.0);
        assert_eq!(map.depth[3], 0.0);
    }

    #[test]
    fn default_ds_rule() {
        let ds = default_ds(0.05, 1.5).unwrap();
        assert!((1.5f64.powi(2) * ds / (2.0 * 0.05f64.powi(3)) - PI).abs() < 1e-12);
        let rep = check_unambiguous_range(0.05, 0.05 + ds, 1.5).unwrap();
        assert!(rep.is_ok());
        assert!(rep.unambiguous_depth > 1.5);
        let rep = check_unambiguous_range(0.05, 0.06, 1.5).unwrap();
        assert!(!rep.is_ok());
    }

    #[test]
    fn options_validation() {
        assert!(DepthOptions::new(0.0, 0.1, Estimator::PhaseRatio).is_err());
        assert!(DepthOptions::new(0.001, 0.0, Estimator::PhaseRatio).is_err());
        assert!(DepthOptions::new(0.001, 1.0, Estimator::PhaseRatio).is_err());
    }

    #[test]
    fn wiener_identity_and_dc() {
        let grid = WallGrid::new(8, 6, 0.01, [0.0; 2]).unwrap();
        let map: Vec<f64> = (0..48).map(|v| (v as f64 * 0.37).sin().abs()).collect();
        assert_eq!(wiener_post_filter(&map, &grid, 0.0).unwrap(), map);
        let flat = vec![0.8; 48];
        for v in wiener_post_filter(&flat, &grid, 0.3).unwrap() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    fn blob_albedo(grid: &WallGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                let g = |ci: f64, cj: f64, w: f64| {
                    (-((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)) / (2.0 * w * w)).exp()
                };
                out[grid.index(i, j)] = g(20.0, 22.0, 4.0) + 0.6 * g(44.0, 40.0, 6.0);
            }
        }
        out
    }

    #[test]
    fn wiener_reduces_noise_error() {
        let grid = WallGrid::new(64, 64, 0.01, [0.0; 2]).unwrap();
        let clean = blob_albedo(&grid);
        let peak = clean.iter().cloned().fold(0.0, f64::max);
        let sigma = 0.1 * peak;
        let normal = Normal::new(0.0, sigma).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = clean.iter().map(|a| a + normal.sample(&mut rng)).collect();
            let power = noisy.iter().map(|a| a * a).sum::<f64>() / noisy.len() as f64;
            let filtered = wiener_post_filter(&noisy, &grid, sigma * sigma / power).unwrap();
            let err = |x: &[f64]| x.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err(&filtered) < err(&noisy), "seed {seed}");
        }
    }
}
