//! Dense proximal-gradient (ISTA) reference solver for the sparse-coding
//! energy.
//!
//! The convolutional synthesis operator is flattened into an explicit
//! `input_len x activation_len` matrix built straight from the kernel indices,
//! without going through [`crate::conv`], so it can serve as an independent
//! check on LCA.

use crate::conv::{self, KernelStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_VARIABLES: usize = 4096;

/// Column-major dense synthesis matrix: column `j` is the input-space image
/// of a unit activation at flat activation index `j`.
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn build(act_dims: [usize; 5], phi: &KernelStack) -> Result<Self> {
        let in_dims = conv::input_dims(&act_dims, phi)?;
        let cols: usize = act_dims.iter().product();
        if cols > MAX_VARIABLES {
            return Err(Error::TooLarge {
                vars: cols,
                limit: MAX_VARIABLES,
            });
        }
        let rows: usize = in_dims.iter().product();
        let [b, at, ah, aw, nf] = act_dims;
        let [_, it, ih, iw, c] = in_dims;
        let [kt, kh, kw] = phi.extent();
        let [st, sh, sw] = phi.stride();
        let w = phi.weights();
        let mut data = vec![0.0f64; rows * cols];
        for bi in 0..b {
            for t in 0..at {
                for h in 0..ah {
                    for x in 0..aw {
                        for f in 0..nf {
                            let col = (((bi * at + t) * ah + h) * aw + x) * nf + f;
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        for ch in 0..c {
                                            let row = (((bi * it + t * st + dt) * ih + h * sh + dh) * iw
                                                + x * sw
                                                + dw)
                                                * c
                                                + ch;
                                            data[col * rows + row] += w.get(&[f, dt, dh, dw, ch]) as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(DenseOperator { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// `A x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (yi, &aij) in y.iter_mut().zip(self.column(j)) {
                    *yi += aij * xj;
                }
            }
        }
        y
    }

    /// `A^T y`
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|j| self.column(j).iter().zip(y).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest eigenvalue of `A^T A` by power iteration.
    pub fn lipschitz(&self, iters: usize) -> f64 {
        let mut v: Vec<f64> = (0..self.cols).map(|j| 1.0 + (j % 7) as f64 * 0.1).collect();
        let mut est = 0.0;
        for _ in 0..iters {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let w = self.apply_t(&self.apply(&v));
            est = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            v = w;
        }
        est
    }
}

/// Solve `min_a 1/2 ||I - A a||^2 + lambda ||a||_1` by `iters` ISTA steps of
/// size `1/L` from `a = 0`.
pub fn ista_oracle(input: &Tensor, phi: &KernelStack, lambda: f32, iters: usize) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let act_dims = conv::output_dims(input.dims(), phi)?;
    let op = DenseOperator::build(act_dims, phi)?;
    // Slight overestimate keeps the step inside the convergent range when
    // power iteration has not fully converged.
    let lip = op.lipschitz(200) * 1.01;
    if lip == 0.0 {
        return Ok(Tensor::zeros(&act_dims));
    }
    let step = 1.0 / lip;
    let thresh = lambda as f64 * step;
    let target: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let mut a = vec![0.0f64; op.cols()];
    for _ in 0..iters {
        let recon = op.apply(&a);
        let resid: Vec<f64> = target.iter().zip(&recon).map(|(t, r)| t - r).collect();
        let grad = op.apply_t(&resid);
        for (ai, gi) in a.iter_mut().zip(&grad) {
            let z = *ai + step * gi;
            *ai = z.signum() * (z.abs() - thresh).max(0.0);
        }
    }
    Tensor::new(&act_dims, a.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn refuses_large_problems() {
        let phi = KernelStack::new(Tensor::zeros(&[8, 1, 1, 1, 1]), [1, 1, 1]).unwrap();
        let input = Tensor::zeros(&[1, 1, 32, 32, 1]);
        assert!(matches!(ista_oracle(&input, &phi, 0.1, 1), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn huge_lambda_gives_zero() {
        let mut rng = crate::rng::seeded(1);
        let phi = KernelStack::new(Tensor::from_fn(&[2, 1, 2, 2, 1], |_| rng.random_range(-1.0f32..1.0)), [1, 1, 1]).unwrap();
        let input = Tensor::from_fn(&[1, 1, 4, 4, 1], |_| rng.random_range(-1.0f32..1.0));
        let a = ista_oracle(&input, &phi, 1e6, 50).unwrap();
        assert_eq!(a.count_nonzero(), 0);
    }

    /// Square invertible operator: one 1x1 atom per channel with a mixing
    /// matrix, so `A` is block diagonal and the least-squares solution is
    /// `M^-1 x` per pixel.
    #[test]
    fn zero_lambda_solves_least_squares() {
        let m = [[2.0f32, 1.0], [0.5, 1.5]];
        let mut w = Tensor::zeros(&[2, 1, 1, 1, 2]);
        for f in 0..2 {
            for c in 0..2 {
                w.set(&[f, 0, 0, 0, c], m[c][f]);
            }
        }
        let phi = KernelStack::new(w, [1, 1, 1]).unwrap();
        let input = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, -1.0, 3.0, 0.5]).unwrap();
        let a = ista_oracle(&input, &phi, 0.0, 5000).unwrap();
        let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) as f64;
        for px in 0..2 {
            let x0 = input.get(&[0, 0, 0, px, 0]) as f64;
            let x1 = input.get(&[0, 0, 0, px, 1]) as f64;
            let s0 = (m[1][1] as f64 * x0 - m[0][1] as f64 * x1) / det;
            let s1 = (-m[1][0] as f64 * x0 + m[0][0] as f64 * x1) / det;
            assert!((a.get(&[0, 0, 0, px, 0]) as f64 - s0).abs() < 1e-4);
            assert!((a.get(&[0, 0, 0, px, 1]) as f64 - s1).abs() < 1e-4);
        }
    }
}
