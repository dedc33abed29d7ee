//! Dense matrix kernels.
//!
//! Every output element is reduced in a fixed order that does not depend on
//! how rows are distributed over threads, so the `parallel` feature changes
//! wall time but never the bits of a result.

use crate::tensor::Float;

/// Work (multiply-adds) below which the parallel path is not worth spawning.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// Fixed-order dot product with eight interleaved partial sums.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Layout of an operand: `false` means stored as written (`m×k` for the left
/// operand), `true` means stored transposed.
#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl Gemm {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        Self {
            m,
            k,
            n,
            trans_a: false,
            trans_b: false,
        }
    }

    pub fn ta(mut self, on: bool) -> Self {
        self.trans_a = on;
        self
    }

    pub fn tb(mut self, on: bool) -> Self {
        self.trans_b = on;
        self
    }

    /// Computes one output row `i` into `crow` (accumulating into it).
    #[inline]
    fn row<T: Float>(&self, a: &[T], b: &[T], i: usize, crow: &mut [T]) {
        let Gemm { m, k, n, .. } = *self;
        match (self.trans_a, self.trans_b) {
            (false, false) => {
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, c) in crow.iter_mut().enumerate() {
                    *c += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
            (true, false) => {
                for p in 0..k {
                    let aip = a[p * m + i];
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
            (true, true) => {
                for (j, c) in crow.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    *c += s;
                }
            }
        }
    }

    /// `c += op(a) · op(b)`, sequentially.
    pub fn run_seq<T: Float>(&self, a: &[T], b: &[T], c: &mut [T]) {
        debug_assert_eq!(a.len(), self.m * self.k);
        debug_assert_eq!(b.len(), self.k * self.n);
        debug_assert_eq!(c.len(), self.m * self.n);
        if self.n == 0 {
            return;
        }
        for (i, crow) in c.chunks_mut(self.n).enumerate() {
            self.row(a, b, i, crow);
        }
    }

    /// `c += op(a) · op(b)`, rows distributed over the rayon pool.
    #[cfg(feature = "parallel")]
    pub fn run_par<T: Float>(&self, a: &[T], b: &[T], c: &mut [T]) {
        use rayon::prelude::*;
        if self.n == 0 {
            return;
        }
        c.par_chunks_mut(self.n)
            .enumerate()
            .for_each(|(i, crow)| self.row(a, b, i, crow));
    }

    /// Dispatches to the parallel kernel for large products when available.
    pub fn run<T: Float>(&self, a: &[T], b: &[T], c: &mut [T]) {
        #[cfg(feature = "parallel")]
        {
            if self.m > 1 && self.m * self.k * self.n >= PAR_THRESHOLD {
                return self.run_par(a, b, c);
            }
        }
        self.run_seq(a, b, c)
    }
}

/// Plain `m×k · k×n` product into a fresh buffer.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    Gemm::new(m, k, n).run(a, b, &mut c);
    c
}
