//! Integration over time: collapses the transient measurement into the
//! aggregated field φ(x; s).
//!
//! Three entry points mirror the three ways the measurement can arrive:
//!
//! * [`aggregate_time`] walks a fully loaded histogram.
//! * [`aggregate_stream`] consumes one time-bin slice at a time and never
//!   holds more than one slice plus the accumulators.
//! * [`EventAccumulator`] / [`aggregate_events`] fold individual photon
//!   detections into the field as they arrive.
//!
//! The histogram routes use midpoint quadrature with bin-center path
//! ρ_n = (n + ½)·bin_length and weight `(ρ_n/2)^k · exp(−i ρ_n²/16s²) · bin_length/2`.
//! The event route uses the per-photon term `r^k · exp(−π i ω r²)` with
//! `ω = 1/(4π s²)` and `r = c·T/2`; it carries no `bin_length/2` factor, so the
//! two routes differ by that constant times the exposure.

use std::f64::consts::PI;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    check_event, check_positive, from_c64, AggregatedField, Falloff, PhotonEvent, PhotonEventList, Real,
    TransientHistogram, WallGrid,
};

/// Quadrature weights `w_n` for every time bin.
pub fn time_weights(nt: usize, bin_length: f64, falloff: Falloff, s: f64) -> Result<Vec<Complex<f64>>> {
    check_positive("s", s)?;
    check_positive("bin_length", bin_length)?;
    let k = falloff.exponent();
    let inv = 1.0 / (16.0 * s * s);
    let half_bin = 0.5 * bin_length;
    Ok((0..nt)
        .map(|n| {
            let rho = (n as f64 + 0.5) * bin_length;
            Complex::from_polar((0.5 * rho).powi(k) * half_bin, -rho * rho * inv)
        })
        .collect())
}

/// φ(x; s) from a fully materialized histogram.
pub fn aggregate_time<T: Real>(hist: &TransientHistogram, s: f64) -> Result<AggregatedField<T>> {
    let mut fields = aggregate_time_multi(hist, &[s])?;
    Ok(fields.remove(0))
}

/// Aggregates the same histogram at several `s` values in one sweep.
pub fn aggregate_time_multi<T: Real>(hist: &TransientHistogram, s_values: &[f64]) -> Result<Vec<AggregatedField<T>>> {
    let nt = hist.nt();
    let weights = s_values
        .iter()
        .map(|&s| time_weights(nt, hist.bin_length(), hist.falloff(), s))
        .collect::<Result<Vec<_>>>()?;
    let mut fields = Vec::with_capacity(s_values.len());
    for w in &weights {
        let data: Vec<Complex<T>> = hist
            .data()
            .par_chunks(nt)
            .map(|bins| {
                let mut acc = Complex::<T>::default();
                for (wn, &tau) in w.iter().zip(bins) {
                    acc = acc + from_c64::<T>(wn * tau);
                }
                acc
            })
            .collect();
        fields.push(data);
    }
    fields
        .into_iter()
        .zip(s_values)
        .map(|(data, &s)| AggregatedField::new(*hist.grid(), s, hist.falloff(), data))
        .collect()
}

/// Pull-based source of time-bin slices τ[·][·][n], delivered in increasing `n`.
pub trait BinSliceStream {
    fn grid(&self) -> &WallGrid;
    fn nt(&self) -> usize;
    fn bin_length(&self) -> f64;
    fn falloff(&self) -> Falloff;

    /// Fills `slice` with the next time bin (row-major `[x][y]`), resizing it
    /// as needed. Returns `Ok(false)` once the source is exhausted.
    fn next_slice(&mut self, slice: &mut Vec<f64>) -> Result<bool>;

    /// Bytes of internal read buffering held by the source itself.
    fn buffer_bytes(&self) -> usize {
        0
    }
}

/// Slices an in-memory histogram; mostly useful for tests and equivalence checks.
#[derive(Debug, Clone)]
pub struct HistogramSlices<'a> {
    hist: &'a TransientHistogram,
    next: usize,
}

impl<'a> HistogramSlices<'a> {
    pub fn new(hist: &'a TransientHistogram) -> Self {
        HistogramSlices { hist, next: 0 }
    }
}

impl BinSliceStream for HistogramSlices<'_> {
    fn grid(&self) -> &WallGrid {
        self.hist.grid()
    }

    fn nt(&self) -> usize {
        self.hist.nt()
    }

    fn bin_length(&self) -> f64 {
        self.hist.bin_length()
    }

    fn falloff(&self) -> Falloff {
        self.hist.falloff()
    }

    fn next_slice(&mut self, slice: &mut Vec<f64>) -> Result<bool> {
        let nt = self.hist.nt();
        if self.next >= nt {
            return Ok(false);
        }
        let n = self.next;
        slice.clear();
        slice.extend(self.hist.data().iter().skip(n).step_by(nt));
        self.next += 1;
        Ok(true)
    }
}

/// φ(x; s) from a bin-slice stream; bit-identical to [`aggregate_time`].
pub fn aggregate_stream<T: Real, S: BinSliceStream + ?Sized>(stream: &mut S, s: f64) -> Result<AggregatedField<T>> {
    let mut fields = aggregate_stream_multi(stream, &[s])?;
    Ok(fields.remove(0))
}

/// Streams once, accumulating one field per `s` value.
pub fn aggregate_stream_multi<T: Real, S: BinSliceStream + ?Sized>(
    stream: &mut S,
    s_values: &[f64],
) -> Result<Vec<AggregatedField<T>>> {
    let grid = *stream.grid();
    let nt = stream.nt();
    let weights = s_values
        .iter()
        .map(|&s| time_weights(nt, stream.bin_length(), stream.falloff(), s))
        .collect::<Result<Vec<_>>>()?;
    let mut accumulators = vec![vec![Complex::<T>::default(); grid.len()]; s_values.len()];
    let mut slice = Vec::with_capacity(grid.len());
    for n in 0..nt {
        if !stream.next_slice(&mut slice)? {
            return Err(Error::Stream(format!(
                "stream ended early: expected {nt} slices, received {n}"
            )));
        }
        if slice.len() != grid.len() {
            return Err(Error::Stream(format!(
                "slice {n} has {} values, grid {}x{} needs {}",
                slice.len(),
                grid.nx(),
                grid.ny(),
                grid.len()
            )));
        }
        for (acc, w) in accumulators.iter_mut().zip(&weights) {
            let wn = w[n];
            acc.par_iter_mut().zip(slice.par_iter()).for_each(|(a, &tau)| {
                *a = *a + from_c64::<T>(wn * tau);
            });
        }
    }
    accumulators
        .into_iter()
        .zip(s_values)
        .map(|(data, &s)| AggregatedField::new(grid, s, stream.falloff(), data))
        .collect()
}

/// Per-photon complex weight `r^k · exp(−π i ω r²)`, `ω = 1/(4π s²)`, `r = tof_path/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdhKernel {
    s: f64,
    omega: f64,
    k: i32,
}

impl FdhKernel {
    pub fn new(s: f64, falloff: Falloff) -> Result<Self> {
        check_positive("s", s)?;
        let omega = 1.0 / (4.0 * PI * s * s);
        // π ω r² must reduce to r² / 4s²
        debug_assert!((PI * omega * 4.0 * s * s - 1.0).abs() < 8.0 * f64::EPSILON);
        Ok(FdhKernel {
            s,
            omega,
            k: falloff.exponent(),
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn weight(&self, tof_path: f64) -> Complex<f64> {
        let r = 0.5 * tof_path;
        Complex::from_polar(r.powi(self.k), -PI * self.omega * r * r)
    }
}

/// Acquisition-time accumulator: folds photon events into one field per `s`.
#[derive(Debug, Clone)]
pub struct EventAccumulator<T: Real = f64> {
    grid: WallGrid,
    falloff: Falloff,
    kernels: Vec<FdhKernel>,
    fields: Vec<Vec<Complex<T>>>,
    seen: usize,
    max_tof_path: f64,
}

impl<T: Real> EventAccumulator<T> {
    pub fn new(grid: WallGrid, falloff: Falloff, s_values: &[f64]) -> Result<Self> {
        let kernels = s_values
            .iter()
            .map(|&s| FdhKernel::new(s, falloff))
            .collect::<Result<Vec<_>>>()?;
        Ok(EventAccumulator {
            grid,
            falloff,
            fields: vec![vec![Complex::default(); grid.len()]; kernels.len()],
            kernels,
            seen: 0,
            max_tof_path: 0.0,
        })
    }

    pub fn push(&mut self, event: &PhotonEvent) -> Result<()> {
        check_event(&self.grid, self.seen, event)?;
        let idx = self.grid.index(event.pixel.0 as usize, event.pixel.1 as usize);
        for (field, kernel) in self.fields.iter_mut().zip(&self.kernels) {
            field[idx] = field[idx] + from_c64::<T>(kernel.weight(event.tof_path));
        }
        self.seen += 1;
        self.max_tof_path = self.max_tof_path.max(event.tof_path);
        Ok(())
    }

    pub fn events_seen(&self) -> usize {
        self.seen
    }

    pub fn max_tof_path(&self) -> f64 {
        self.max_tof_path
    }

    /// Bytes held by the accumulator fields.
    pub fn field_bytes(&self) -> usize {
        self.fields.len() * self.grid.len() * 2 * T::BYTES
    }

    pub fn finish(self) -> Result<Vec<AggregatedField<T>>> {
        let grid = self.grid;
        let falloff = self.falloff;
        self.fields
            .into_iter()
            .zip(self.kernels)
            .map(|(data, kernel)| AggregatedField::new(grid, kernel.s(), falloff, data))
            .collect()
    }
}

/// φ(x; s) from a photon event list, one pass over the events in input order.
pub fn aggregate_events<T: Real>(events: &PhotonEventList, s: f64) -> Result<AggregatedField<T>> {
    let mut acc = EventAccumulator::<T>::new(*events.grid(), events.falloff(), &[s])?;
    for ev in events.events() {
        acc.push(ev)?;
    }
    Ok(acc.finish()?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{render_histogram, Deposit, RenderOptions};
    use crate::model::{SceneSurfels, Surfel};

    fn grid2() -> WallGrid {
        WallGrid::new(2, 3, 0.1, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_histogram_gives_zero_field() {
        let hist = TransientHistogram::zeros(grid2(), 10, 0.01, Falloff::Isotropic).unwrap();
        let phi: AggregatedField = aggregate_time(&hist, 0.1).unwrap();
        assert!(phi.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn unit_impulse_reads_off_weight() {
        let grid = grid2();
        let nt = 12;
        let mut data = vec![0.0; grid.len() * nt];
        let (i, j, n) = (1, 2, 7);
        data[grid.index(i, j) * nt + n] = 1.0;
        let hist = TransientHistogram::new(grid, nt, 0.02, Falloff::Retroreflective, data).unwrap();
        let phi: AggregatedField = aggregate_time(&hist, 0.07).unwrap();
        let rho = 7.5 * 0.02;
        let expected = Complex::from_polar((rho / 2.0f64).powi(2) * 0.01, -rho * rho / (16.0 * 0.07 * 0.07));
        assert_eq!(phi.get(i, j), expected);
        for ii in 0..2 {
            for jj in 0..3 {
                if (ii, jj) != (i, j) {
                    assert_eq!(phi.get(ii, jj).norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_surfel_nearest_bin_amplitude() {
        let grid = WallGrid::new(1, 1, 0.01, [0.0; 2]).unwrap();
        let scene = SceneSurfels::new(vec![Surfel::new([0.0, 0.0, 1.0], 0.6).unwrap()]);
        let opts = RenderOptions {
            deposit: Deposit::NearestBin,
            ..Default::default()
        };
        let hist = render_histogram(&scene, &grid, 400, 0.01, Falloff::Retroreflective, &opts)
            .unwrap()
            .histogram;
        let s = 0.3;
        let phi: AggregatedField = aggregate_time(&hist, s).unwrap();
        // bin 200 has center path 2.005 m; the weight evaluates (ρ/2)^k there
        // while the deposit used the exact r = 1 m
        let rho = 2.005;
        let expected = Complex::from_polar(0.6 * (rho / 2.0f64).powi(2), -rho * rho / (16.0 * s * s));
        assert!((phi.get(0, 0) - expected).norm() < 1e-12);
    }

    #[test]
    fn stream_matches_batch_bitwise() {
        let grid = WallGrid::new(5, 4, 0.05, [-0.1, -0.1]).unwrap();
        let scene = SceneSurfels::new(vec![
            Surfel::new([0.0, 0.02, 0.5], 1.0).unwrap(),
            Surfel::new([-0.1, 0.05, 0.8], 0.3).unwrap(),
        ]);
        let hist = render_histogram(&scene, &grid, 256, 0.008, Falloff::Isotropic, &RenderOptions::default())
            .unwrap()
            .histogram;
        let batch: Vec<AggregatedField> = aggregate_time_multi(&hist, &[0.05, 0.051]).unwrap();
        let streamed: Vec<AggregatedField> =
            aggregate_stream_multi(&mut HistogramSlices::new(&hist), &[0.05, 0.051]).unwrap();
        assert_eq!(batch, streamed);
        let single: AggregatedField = aggregate_stream(&mut HistogramSlices::new(&hist), 0.051).unwrap();
        assert_eq!(single, batch[1]);
    }

    struct ShortStream {
        grid: WallGrid,
        sent: usize,
        limit: usize,
        width: usize,
    }

    impl BinSliceStream for ShortStream {
        fn grid(&self) -> &WallGrid {
            &self.grid
        }
        fn nt(&self) -> usize {
            4
        }
        fn bin_length(&self) -> f64 {
            0.01
        }
        fn falloff(&self) -> Falloff {
            Falloff::Isotropic
        }
        fn next_slice(&mut self, slice: &mut Vec<f64>) -> Result<bool> {
            if self.sent == self.limit {
                return Ok(false);
            }
            self.sent += 1;
            slice.clear();
            slice.resize(self.width, 0.0);
            Ok(true)
        }
    }

    #[test]
    fn premature_end_names_counts() {
        let mut s = ShortStream {
            grid: grid2(),
            sent: 0,
            limit: 2,
            width: 6,
        };
        let err = aggregate_stream::<f64, _>(&mut s, 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 4") && msg.contains("received 2"), "{msg}");
    }

    #[test]
    fn slice_dimension_mismatch_is_stream_error() {
        let mut s = ShortStream {
            grid: grid2(),
            sent: 0,
            limit: 4,
            width: 5,
        };
        assert!(matches!(aggregate_stream::<f64, _>(&mut s, 0.1), Err(Error::Stream(_))));
    }

    #[test]
    fn event_term_hand_value() {
        let grid = WallGrid::new(1, 1, 0.1, [0.0; 2]).unwrap();
        let events = PhotonEventList::new(
            grid,
            Falloff::Retroreflective,
            vec![PhotonEvent {
                pixel: (0, 0),
                tof_path: 2.0,
            }],
        )
        .unwrap();
        let phi: AggregatedField = aggregate_events(&events, 0.5).unwrap();
        assert!((phi.get(0, 0) - Complex::from_polar(1.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn empty_and_duplicated_events() {
        let grid = grid2();
        let empty = PhotonEventList::new(grid, Falloff::Isotropic, vec![]).unwrap();
        let phi: AggregatedField = aggregate_events(&empty, 0.2).unwrap();
        assert!(phi.data().iter().all(|z| z.norm() == 0.0));

        let evs = vec![
            PhotonEvent {
                pixel: (0, 1),
                tof_path: 1.3,
            },
            PhotonEvent {
                pixel: (1, 2),
                tof_path: 0.9,
            },
        ];
        let once = PhotonEventList::new(grid, Falloff::Isotropic, evs.clone()).unwrap();
        let twice = PhotonEventList::new(grid, Falloff::Isotropic, [evs.clone(), evs].concat()).unwrap();
        let a: AggregatedField = aggregate_events(&once, 0.2).unwrap();
        let b: AggregatedField = aggregate_events(&twice, 0.2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x * 2.0, *y);
        }
    }

    #[test]
    fn out_of_grid_event_names_index() {
        let mut acc = EventAccumulator::<f64>::new(grid2(), Falloff::Isotropic, &[0.1]).unwrap();
        acc.push(&PhotonEvent {
            pixel: (0, 0),
            tof_path: 1.0,
        })
        .unwrap();
        let err = acc
            .push(&PhotonEvent {
                pixel: (0, 3),
                tof_path: 1.0,
            })
            .unwrap_err();
        assert!(err.to_string().contains("event 1"));
    }

    #[test]
    fn kernel_identity_between_omega_and_s_forms() {
        for &s in &[0.02, 0.05, 0.5, 3.0] {
            let kern = FdhKernel::new(s, Falloff::Isotropic).unwrap();
            for &path in &[0.1, 1.0, 2.7] {
                let r: f64 = path / 2.0;
                let direct = Complex::from_polar(r.powi(4), -r * r / (4.0 * s * s));
                assert!((kern.weight(path) - direct).norm() <= 1e-12 * direct.norm());
            }
        }
    }

    #[test]
    fn rejects_bad_s() {
        let hist = TransientHistogram::zeros(grid2(), 4, 0.01, Falloff::Isotropic).unwrap();
        assert!(aggregate_time::<f64>(&hist, 0.0).is_err());
        assert!(aggregate_time::<f64>(&hist, -1.0).is_err());
        assert!(FdhKernel::new(f64::NAN, Falloff::Isotropic).is_err());
    }
}
