//! Matrix-multiply kernel shared by the forward and backward passes.
//!
//! Backed by `matrixmultiply`'s strided dgemm. With the `parallel` feature,
//! large products are split into row blocks and run on the rayon pool; each
//! output element is computed by the same sequence of operations in both
//! paths, so results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (m·k·n) above which the row-split parallel path is used.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 20;
#[cfg(feature = "parallel")]
const PAR_MIN_ROWS: usize = 32;

/// Operand layout: `a` is m×k (or k×m when `a_t`), `b` is k×n (or n×k when
/// `b_t`), `c` is m×n. When `accumulate` is set the product is added to `c`.
#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_t: bool,
    pub b_t: bool,
    pub accumulate: bool,
}

impl Gemm {
    pub fn nn(m: usize, k: usize, n: usize) -> Self {
        Self {
            m,
            k,
            n,
            a_t: false,
            b_t: false,
            accumulate: false,
        }
    }

    pub fn run(self, a: &[f64], b: &[f64], c: &mut [f64]) {
        #[cfg(feature = "parallel")]
        if self.m * self.k * self.n >= PAR_THRESHOLD && self.m >= 2 * PAR_MIN_ROWS {
            return self.run_parallel(a, b, c);
        }
        self.run_sequential(a, b, c)
    }

    pub fn run_sequential(self, a: &[f64], b: &[f64], c: &mut [f64]) {
        self.block(0, self.m, a, b, c);
    }

    /// Row-split variant; falls back to the sequential kernel when the
    /// `parallel` feature is disabled.
    pub fn run_parallel(self, a: &[f64], b: &[f64], c: &mut [f64]) {
        #[cfg(feature = "parallel")]
        {
            let n = self.n.max(1);
            let chunk = (self.m / rayon::current_num_threads().max(1)).max(PAR_MIN_ROWS);
            c.par_chunks_mut(chunk * n)
                .enumerate()
                .for_each(|(i, c_block)| {
                    let r0 = i * chunk;
                    let rows = c_block.len() / n;
                    self.block(r0, rows, a, b, c_block);
                });
        }
        #[cfg(not(feature = "parallel"))]
        self.run_sequential(a, b, c)
    }

    fn block(self, r0: usize, rows: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        let Gemm { m, k, n, .. } = self;
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        if rows == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !self.accumulate {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        let (a_off, rsa, csa) = if self.a_t {
            (r0, 1isize, m as isize)
        } else {
            (r0 * k, k as isize, 1isize)
        };
        let (rsb, csb) = if self.b_t {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        let beta = if self.accumulate { 1.0 } else { 0.0 };
        // SAFETY: strides describe the row block [r0, r0 + rows) of A and the
        // full B inside their slices, and `c` holds exactly rows×n values.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn transposed_layouts_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let g = Gemm {
                a_t,
                b_t,
                ..Gemm::nn(m, k, n)
            };
            g.run(if a_t { &at } else { &a }, if b_t { &bt } else { &b }, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_split_is_bit_identical() {
        let (m, k, n) = (301, 64, 65);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.029).cos()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        Gemm::nn(m, k, n).run_sequential(&a, &b, &mut c1);
        Gemm::nn(m, k, n).run_parallel(&a, &b, &mut c2);
        assert_eq!(c1, c2);
    }
}
