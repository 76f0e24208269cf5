//! Deconvolution in space: ψ(x; s) from φ(x; s).
//!
//! ψ[i][j] = (pitch² / 16π²s⁴) · Σ_{ĩ,j̃} exp(i‖x̃ − x‖²/4s²) · φ[ĩ][j̃]
//!
//! The chirp factorizes into one 1-D chirp per axis, so [`Deconvolver`]
//! convolves rows and then columns in place with zero-padded 1-D FFTs. Only
//! the two 1-D filter spectra plus one line buffer are held besides the field
//! itself. [`deconvolve_direct`] evaluates the same sum literally and is the
//! reference for the FFT path.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::ledger::BufferInfo;
use crate::model::{check_positive, from_c64, to_c64, AggregatedField, ModulatedAlbedo, Real, WallGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Linear convolution: zero-pad so no output sees wrapped-around input.
    #[default]
    Full,
    /// Circular convolution on the unpadded grid.
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelExtent {
    /// Kernel support covers every offset the field can produce.
    #[default]
    Matched,
    /// Full kernel widths per axis; both must be odd.
    Explicit { kx: usize, ky: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeconvOptions {
    pub padding: Padding,
    pub kernel_extent: KernelExtent,
}

/// Outcome of the chirp sampling check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingReport {
    /// Largest per-pixel phase increment of the chirp over its support, radians.
    pub max_phase_step: f64,
    /// Largest |offset| in the kernel support, meters.
    pub max_offset: f64,
}

impl SamplingReport {
    pub fn is_ok(&self) -> bool {
        self.max_phase_step <= PI
    }

    pub fn is_aliased(&self) -> bool {
        !self.is_ok()
    }
}

/// `exp(i (m·pitch)² / 4s²)` for `m ∈ [−half_extent, half_extent]`.
pub fn chirp_kernel_1d(half_extent: usize, pitch: f64, s: f64) -> Vec<Complex<f64>> {
    let inv = 1.0 / (4.0 * s * s);
    let h = half_extent as isize;
    (-h..=h)
        .map(|m| {
            let u = m as f64 * pitch;
            Complex::from_polar(1.0, u * u * inv)
        })
        .collect()
}

/// Riemann measure and normalization in front of the sum.
pub fn deconvolution_scale(pitch: f64, s: f64) -> f64 {
    pitch * pitch / (16.0 * PI * PI * s.powi(4))
}

/// Smallest length ≥ `n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Kernel support along one axis of length `n`.
#[derive(Debug, Clone)]
struct AxisKernel {
    n: usize,
    half: usize,
    circular: bool,
    chirp: Vec<Complex<f64>>,
}

impl AxisKernel {
    fn new(n: usize, width: Option<usize>, padding: Padding, pitch: f64, s: f64) -> Result<Self> {
        let circular = padding == Padding::Circular;
        let half = match width {
            None if circular => n / 2,
            None => n - 1,
            Some(w) => {
                if w == 0 || w % 2 == 0 {
                    return Err(Error::param(
                        "kernel_extent",
                        format!("extents must be odd and >= 1, got {w}"),
                    ));
                }
                if circular && w > n {
                    return Err(Error::param(
                        "kernel_extent",
                        format!("circular padding needs kernel width {w} <= axis length {n}"),
                    ));
                }
                (w - 1) / 2
            }
        };
        Ok(AxisKernel {
            n,
            half,
            circular,
            chirp: chirp_kernel_1d(half, pitch, s),
        })
    }

    /// Kernel value for output index minus input index.
    fn at(&self, offset: isize) -> Complex<f64> {
        let m = if self.circular {
            let r = offset.rem_euclid(self.n as isize) as usize;
            r.min(self.n - r)
        } else {
            offset.unsigned_abs()
        };
        if m <= self.half {
            self.chirp[self.half + m]
        } else {
            Complex::new(0.0, 0.0)
        }
    }

    fn transform_len(&self) -> usize {
        if self.circular {
            self.n
        } else {
            next_fast_len(self.n + self.effective_half())
        }
    }

    /// Offsets beyond n − 1 never pair an output with an input.
    fn effective_half(&self) -> usize {
        self.half.min(self.n - 1)
    }

    /// Kernel laid out on a circular buffer of `len` samples.
    fn wrapped(&self, len: usize) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        if self.circular {
            for (r, v) in buf.iter_mut().enumerate() {
                *v = self.at(r as isize);
            }
        } else {
            let h = self.effective_half() as isize;
            let center = self.half as isize;
            for m in -h..=h {
                buf[m.rem_euclid(len as isize) as usize] = self.chirp[(m + center) as usize];
            }
        }
        buf
    }
}

fn axis_kernels(grid: &WallGrid, s: f64, opts: &DeconvOptions) -> Result<[AxisKernel; 2]> {
    check_positive("s", s)?;
    let (wx, wy) = match opts.kernel_extent {
        KernelExtent::Matched => (None, None),
        KernelExtent::Explicit { kx, ky } => (Some(kx), Some(ky)),
    };
    Ok([
        AxisKernel::new(grid.nx(), wx, opts.padding, grid.pitch(), s)?,
        AxisKernel::new(grid.ny(), wy, opts.padding, grid.pitch(), s)?,
    ])
}

/// Sampling check for the default (matched, fully padded) kernel.
pub fn check_chirp_sampling(grid: &WallGrid, s: f64) -> Result<SamplingReport> {
    check_chirp_sampling_with(grid, s, &DeconvOptions::default())
}

/// Maximum chirp phase step `U_max · pitch / 2s²` over the kernel support.
pub fn check_chirp_sampling_with(grid: &WallGrid, s: f64, opts: &DeconvOptions) -> Result<SamplingReport> {
    let axes = axis_kernels(grid, s, opts)?;
    let half = axes.iter().map(|a| a.half).max().unwrap_or(0);
    let max_offset = half as f64 * grid.pitch();
    Ok(SamplingReport {
        max_phase_step: max_offset * grid.pitch() / (2.0 * s * s),
        max_offset,
    })
}

struct AxisPlan<T: Real> {
    n: usize,
    len: usize,
    filter: Vec<Complex<T>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

/// Reusable FFT deconvolution for one grid, `s` and option set.
pub struct Deconvolver<T: Real = f64> {
    grid: WallGrid,
    s: f64,
    axes: [AxisPlan<T>; 2],
    line: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: Real> std::fmt::Debug for Deconvolver<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deconvolver")
            .field("grid", &self.grid)
            .field("s", &self.s)
            .field("transform_lens", &[self.axes[0].len, self.axes[1].len])
            .finish()
    }
}

impl<T: Real> Deconvolver<T> {
    pub fn new(grid: &WallGrid, s: f64, opts: &DeconvOptions) -> Result<Self> {
        let kernels = axis_kernels(grid, s, opts)?;
        let mut planner = FftPlanner::<T>::new();
        let scale = deconvolution_scale(grid.pitch(), s);
        let mut scratch_len = 0;
        let mut max_len = 0;
        let mut plans = Vec::with_capacity(2);
        for (axis, kernel) in kernels.iter().enumerate() {
            let len = kernel.transform_len();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            // FFT of the kernel in f64, then cast; the 1/len of the inverse
            // transform and the sum's prefactor are folded in here.
            let mut spectrum = kernel.wrapped(len);
            FftPlanner::<f64>::new().plan_fft_forward(len).process(&mut spectrum);
            let factor = if axis == 0 {
                scale / len as f64
            } else {
                1.0 / len as f64
            };
            let filter = spectrum.into_iter().map(|z| from_c64::<T>(z * factor)).collect();
            scratch_len = scratch_len
                .max(forward.get_inplace_scratch_len())
                .max(inverse.get_inplace_scratch_len());
            max_len = max_len.max(len);
            plans.push(AxisPlan {
                n: kernel.n,
                len,
                filter,
                forward,
                inverse,
            });
        }
        let y = plans.pop().expect("two axes");
        let x = plans.pop().expect("two axes");
        Ok(Deconvolver {
            grid: *grid,
            s,
            axes: [x, y],
            line: vec![Complex::default(); max_len],
            scratch: vec![Complex::default(); scratch_len],
        })
    }

    pub fn transform_lens(&self) -> [usize; 2] {
        [self.axes[0].len, self.axes[1].len]
    }

    /// Buffers owned by the deconvolver, for memory accounting.
    pub fn buffers(&self) -> Vec<BufferInfo> {
        let c = 2 * T::BYTES;
        vec![
            BufferInfo::new("chirp_filter_x", self.axes[0].filter.len(), c),
            BufferInfo::new("chirp_filter_y", self.axes[1].filter.len(), c),
            BufferInfo::new("fft_line", self.line.len(), c),
            BufferInfo::new("fft_scratch", self.scratch.len(), c),
        ]
    }

    fn convolve_line(line: &mut [Complex<T>], scratch: &mut [Complex<T>], plan: &AxisPlan<T>) {
        for v in line[plan.n..plan.len].iter_mut() {
            *v = Complex::default();
        }
        let buf = &mut line[..plan.len];
        plan.forward.process_with_scratch(buf, scratch);
        for (v, f) in buf.iter_mut().zip(&plan.filter) {
            *v = *v * *f;
        }
        plan.inverse.process_with_scratch(buf, scratch);
    }

    /// Deconvolves a row-major field buffer in place.
    pub fn apply_in_place(&mut self, data: &mut [Complex<T>]) -> Result<()> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if data.len() != nx * ny {
            return Err(Error::Data(format!(
                "field has {} values, deconvolver expects {}",
                data.len(),
                nx * ny
            )));
        }
        if let Some(pos) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Data(format!("non-finite value in phi at flat index {pos}")));
        }
        let [ax, ay] = &self.axes;
        for row in data.chunks_exact_mut(ny) {
            self.line[..ny].copy_from_slice(row);
            Self::convolve_line(&mut self.line, &mut self.scratch, ay);
            row.copy_from_slice(&self.line[..ny]);
        }
        for j in 0..ny {
            for i in 0..nx {
                self.line[i] = data[i * ny + j];
            }
            Self::convolve_line(&mut self.line, &mut self.scratch, ax);
            for i in 0..nx {
                data[i * ny + j] = self.line[i];
            }
        }
        Ok(())
    }

    /// Consumes φ and returns ψ in the same storage.
    pub fn apply(&mut self, phi: AggregatedField<T>) -> Result<ModulatedAlbedo<T>> {
        if !phi.grid().same_geometry(&self.grid) {
            return Err(Error::Data("field grid does not match deconvolver grid".into()));
        }
        if phi.s() != self.s {
            return Err(Error::param(
                "s",
                format!("field has s = {}, deconvolver built for s = {}", phi.s(), self.s),
            ));
        }
        let s = phi.s();
        let mut data = phi.into_data();
        self.apply_in_place(&mut data)?;
        ModulatedAlbedo::new(self.grid, s, data)
    }
}

/// FFT deconvolution of a field (copies φ; see [`Deconvolver::apply`] to reuse storage).
pub fn deconvolve_fft<T: Real>(phi: &AggregatedField<T>, opts: &DeconvOptions) -> Result<ModulatedAlbedo<T>> {
    Deconvolver::new(phi.grid(), phi.s(), opts)?.apply(phi.clone())
}

/// Literal O(N⁴) evaluation of the deconvolution sum, row-major summation order.
pub fn deconvolve_direct<T: Real>(phi: &AggregatedField<T>, opts: &DeconvOptions) -> Result<ModulatedAlbedo<f64>> {
    let grid = *phi.grid();
    let [kx, ky] = axis_kernels(&grid, phi.s(), opts)?;
    let scale = deconvolution_scale(grid.pitch(), phi.s());
    let (nx, ny) = (grid.nx(), grid.ny());
    let src: Vec<Complex<f64>> = phi.data().iter().map(|&z| to_c64(z)).collect();
    let mut out = vec![Complex::new(0.0, 0.0); nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let mut acc = Complex::new(0.0, 0.0);
            for ii in 0..nx {
                let wx = kx.at(i as isize - ii as isize);
                for jj in 0..ny {
                    let w = wx * ky.at(j as isize - jj as isize);
                    acc += w * src[ii * ny + jj];
                }
            }
            out[i * ny + j] = acc * scale;
        }
    }
    ModulatedAlbedo::new(grid, phi.s(), out)
}

/// 2-D kernel value at pixel offset `(m1, m2)`: the product of the 1-D chirps.
pub fn chirp_kernel_2d(m1: isize, m2: isize, pitch: f64, s: f64) -> Complex<f64> {
    let h = m1.unsigned_abs().max(m2.unsigned_abs());
    let k = chirp_kernel_1d(h, pitch, s);
    k[(m1 + h as isize) as usize] * k[(m2 + h as isize) as usize]
}
