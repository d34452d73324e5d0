//! Dense LU factorisation with partial pivoting for the small systems used by
//! the initial-condition solve and the implicit integrator.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::{CoreError, Result};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + PartialEq
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Row-major packed LU factors `P·A = L·U` (unit lower triangle implied).
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(n: usize, mut a: Vec<T>) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix must be n×n");
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (mut p, mut best) = (k, a[k * n + k].modulus());
            for i in k + 1..n {
                let m = a[i * n + k].modulus();
                if m > best {
                    best = m;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(CoreError::Singular { condition: f64::INFINITY });
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                piv.swap(k, p);
            }
            let d = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / d;
                a[i * n + k] = f;
                if f == T::zero() {
                    continue;
                }
                for j in k + 1..n {
                    a[i * n + j] = a[i * n + j] - f * a[k * n + j];
                }
            }
        }
        Ok(Self { n, lu: a, piv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let pb: Vec<T> = self.piv.iter().map(|&i| b[i]).collect();
        b.copy_from_slice(&pb);
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s = s - self.lu[i * n + j] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s = s - self.lu[i * n + j] * b[j];
            }
            b[i] = s / self.lu[i * n + i];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

fn norm1(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// 1-norm condition number computed from the explicit inverse. Only meant
/// for the small systems in this crate.
pub fn condition_estimate(n: usize, a: &[f64]) -> Result<f64> {
    let lu = match Lu::factor(n, a.to_vec()) {
        Ok(lu) => lu,
        Err(_) => return Err(CoreError::Singular { condition: f64::INFINITY }),
    };
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        lu.solve_in_place(&mut e);
        for i in 0..n {
            inv[i * n + j] = e[i];
        }
    }
    let c = norm1(n, a) * norm1(n, &inv);
    if !c.is_finite() || c > 1e15 {
        return Err(CoreError::Singular { condition: c });
    }
    Ok(c)
}

pub fn matvec(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}
