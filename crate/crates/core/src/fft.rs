//! Small d-dimensional FFT layer over `rustfft`.
//!
//! Fields live on periodic lattices of shape `nx^d` (row-major, axis 0
//! slowest).  The helpers here run an unnormalized forward transform, an
//! inverse transform with the `1/nx^d` normalization folded in, and expose the
//! signed integer frequencies so callers can evaluate Fourier multipliers.
//! Plans are `Arc`-shared and safe to use from parallel workers.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Cached forward/inverse plans for one lattice size.
#[derive(Clone)]
pub struct FftBox {
    dim: usize,
    nx: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FftBox {
    /// Plans transforms for a `nx^dim` lattice (`dim` in 1..=3, `nx >= 2`).
    pub fn new(dim: usize, nx: usize) -> Self {
        assert!((1..=3).contains(&dim), "dim must be 1..=3");
        assert!(nx >= 2, "nx must be at least 2");
        let mut planner = FftPlanner::new();
        FftBox {
            dim,
            nx,
            fwd: planner.plan_fft_forward(nx),
            inv: planner.plan_fft_inverse(nx),
        }
    }

    pub fn len(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place unnormalized forward transform along every axis.
    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len());
        for axis in 0..self.dim {
            self.transform_axis(data, axis, &self.fwd);
        }
    }

    /// In-place inverse transform along every axis, normalized by `1/nx^d`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len());
        for axis in 0..self.dim {
            self.transform_axis(data, axis, &self.inv);
        }
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform_axis(&self, data: &mut [Complex64], axis: usize, plan: &Arc<dyn Fft<f64>>) {
        let nx = self.nx;
        // Row-major: stride of `axis` is nx^(dim-1-axis).
        let stride = nx.pow((self.dim - 1 - axis) as u32);
        let block = stride * nx; // one full sweep of the axis plus inner indices
        let mut line = vec![Complex64::default(); nx];
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let outer = data.len() / block;
        for o in 0..outer {
            for i in 0..stride {
                let base = o * block + i;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + k * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (k, slot) in line.iter().enumerate() {
                    data[base + k * stride] = *slot;
                }
            }
        }
    }
}

/// Signed integer frequency for bin `k` of an `nx`-point transform.
///
/// Bins `0..=nx/2` map to `0..=nx/2`; the rest wrap to negative frequencies.
#[inline]
pub fn signed_freq(k: usize, nx: usize) -> i64 {
    if k <= nx / 2 {
        k as i64
    } else {
        k as i64 - nx as i64
    }
}

/// Calls `f(flat, xi)` for every frequency bin of an `nx^dim` lattice, where
/// `xi` holds the continuous frequencies `xi_unit * signed_freq` per axis.
pub fn for_each_freq(dim: usize, nx: usize, xi_unit: f64, mut f: impl FnMut(usize, &[f64; 3])) {
    let len = nx.pow(dim as u32);
    let mut xi = [0.0f64; 3];
    for flat in 0..len {
        let mut rem = flat;
        // Row-major decomposition: axis 0 slowest.
        for axis in (0..dim).rev() {
            let k = rem % nx;
            rem /= nx;
            xi[axis] = xi_unit * signed_freq(k, nx) as f64;
        }
        f(flat, &xi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let fft = FftBox::new(2, 8);
        let mut data: Vec<Complex64> = (0..64)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), 0.0))
            .collect();
        let orig = data.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn forward_picks_out_single_mode() {
        // f(x) = exp(i * 2 * x0) on a 16-point axis with unit spacing 2*pi/16.
        let nx = 16;
        let fft = FftBox::new(1, nx);
        let mut data: Vec<Complex64> = (0..nx)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / nx as f64;
                Complex64::new(0.0, 2.0 * x).exp()
            })
            .collect();
        fft.forward(&mut data);
        for (k, v) in data.iter().enumerate() {
            let expect = if k == 2 { nx as f64 } else { 0.0 };
            assert!(
                (v.norm() - expect).abs() < 1e-9,
                "bin {k} has magnitude {}",
                v.norm()
            );
        }
    }

    #[test]
    fn signed_freqs_wrap() {
        assert_eq!(signed_freq(0, 8), 0);
        assert_eq!(signed_freq(4, 8), 4);
        assert_eq!(signed_freq(5, 8), -3);
        assert_eq!(signed_freq(7, 8), -1);
    }
}
