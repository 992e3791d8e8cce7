//! Orthonormal type-I discrete sine transform on `s^d` grids, via complex FFTs.
//!
//! `S_k = sqrt(2/(n+1)) Σ_j x_j sin(π j k / (n+1))`, `j, k = 1..n`. The transform
//! is its own inverse. A line is odd-extended to length `2(n+1)`; two real
//! lines are packed into one complex FFT.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct SineTransform {
    n: usize,
    dim: usize,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl SineTransform {
    pub fn new(n: usize, dim: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(2 * (n + 1));
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self { n, dim, fft, buffer: vec![Complex64::default(); 2 * (n + 1)], scratch }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn transform_pair(&mut self, a: &mut [f64], b: &mut [f64]) {
        let n = self.n;
        let buf = &mut self.buffer;
        buf[0] = Complex64::default();
        buf[n + 1] = Complex64::default();
        for j in 0..n {
            let z = Complex64::new(a[j], b[j]);
            buf[j + 1] = z;
            buf[2 * (n + 1) - 1 - j] = -z;
        }
        self.fft.process_with_scratch(buf, &mut self.scratch);
        let scale = (2.0 / (n + 1) as f64).sqrt() * 0.5;
        for k in 0..n {
            let y = buf[k + 1];
            a[k] = -y.im * scale;
            b[k] = y.re * scale;
        }
    }

    /// In-place transform along every axis of row-major data.
    pub fn apply(&mut self, data: &mut [f64]) {
        assert_eq!(data.len(), self.len());
        let n = self.n;
        let mut line_a = vec![0.0; n];
        let mut line_b = vec![0.0; n];
        for axis in 0..self.dim {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            // starting offsets of all lines along this axis
            let starts: Vec<usize> = (0..data.len()).filter(|&i| (i / stride) % n == 0).collect();
            for pair in starts.chunks(2) {
                for j in 0..n {
                    line_a[j] = data[pair[0] + j * stride];
                    line_b[j] = if pair.len() == 2 { data[pair[1] + j * stride] } else { 0.0 };
                }
                self.transform_pair(&mut line_a, &mut line_b);
                for j in 0..n {
                    data[pair[0] + j * stride] = line_a[j];
                    if pair.len() == 2 {
                        data[pair[1] + j * stride] = line_b[j];
                    }
                }
            }
        }
    }
}
