//! Dense nonsymmetric eigensolver: Householder reduction to Hessenberg form,
//! Francis double-shift QR for the eigenvalues and complex inverse iteration
//! for the eigenvectors.

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::linalg::Lu;

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted by |Re λ| descending.
    pub values: Vec<Complex64>,
    /// `vectors[j]` is the unit-norm eigenvector of `values[j]`, phased so
    /// that its largest-magnitude entry is real and positive.
    pub vectors: Vec<Vec<Complex64>>,
}

impl EigenDecomposition {
    /// max_j ‖A q_j − λ_j q_j‖ / ‖A‖_∞.
    pub fn max_relative_residual(&self, n: usize, a: &[f64]) -> f64 {
        let anorm = inf_norm(n, a).max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for (lam, q) in self.values.iter().zip(&self.vectors) {
            let mut r = 0.0;
            for i in 0..n {
                let mut s = -lam * q[i];
                for j in 0..n {
                    s += a[i * n + j] * q[j];
                }
                r += s.norm_sqr();
            }
            worst = worst.max(r.sqrt() / anorm);
        }
        worst
    }
}

fn inf_norm(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|i| a[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Householder reduction of a row-major n×n matrix to upper Hessenberg form.
pub fn hessenberg(n: usize, a: &mut [f64]) {
    for k in 0..n.saturating_sub(2) {
        let alpha: f64 = (k + 1..n).map(|i| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let x0 = a[(k + 1) * n + k];
        let beta = if x0 > 0.0 { -alpha } else { alpha };
        let mut v = vec![0.0; n];
        v[k + 1] = x0 - beta;
        for i in k + 2..n {
            v[i] = a[i * n + k];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A ← H A H with H = I − 2 v vᵀ / vᵀv.
        for j in 0..n {
            let s: f64 = (k + 1..n).map(|i| v[i] * a[i * n + j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k + 1..n {
                a[i * n + j] -= s * v[i];
            }
        }
        for i in 0..n {
            let s: f64 = (k + 1..n).map(|j| a[i * n + j] * v[j]).sum::<f64>() * 2.0 / vnorm2;
            for j in k + 1..n {
                a[i * n + j] -= s * v[j];
            }
        }
        for i in k + 2..n {
            a[i * n + k] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of an upper Hessenberg matrix (destroyed on exit).
pub fn hqr(n: usize, a: &mut [f64]) -> Result<Vec<Complex64>> {
    let idx = |i: usize, j: usize| i * n + j;
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[idx(i, j)].abs();
        }
    }
    let max_total = 100 * n;
    let mut total = 0usize;
    let mut t = 0.0;
    let mut nn = n as isize - 1;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l > 0 {
                let mut s = a[idx(l - 1, l - 1)].abs() + a[idx(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[idx(l, l - 1)].abs() + s == s {
                    a[idx(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[idx(nu, nu)];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[idx(nu - 1, nu - 1)];
            let mut w = a[idx(nu, nu - 1)] * a[idx(nu - 1, nu)];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != 0.0 {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if total >= max_total {
                return Err(CoreError::EigenNoConvergence { iterations: total });
            }
            if its == 10 || its == 20 {
                // Exceptional shift.
                t += x;
                for i in 0..=nu {
                    a[idx(i, i)] -= x;
                }
                let s = a[idx(nu, nu - 1)].abs() + a[idx(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            total += 1;
            let (mut p, mut q, mut r, mut z);
            let mut m = nu - 2;
            loop {
                z = a[idx(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[idx(m + 1, m)] + a[idx(m, m + 1)];
                q = a[idx(m + 1, m + 1)] - z - rr - ss;
                r = a[idx(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[idx(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[idx(m - 1, m - 1)].abs() + z.abs() + a[idx(m + 1, m + 1)].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m..nu - 1 {
                a[idx(i + 2, i)] = 0.0;
                if i != m {
                    a[idx(i + 2, i - 1)] = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[idx(k, k - 1)];
                    q = a[idx(k + 1, k - 1)];
                    r = 0.0;
                    if k + 1 != nu {
                        r = a[idx(k + 2, k - 1)];
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[idx(k, k - 1)] = -a[idx(k, k - 1)];
                        }
                    } else {
                        a[idx(k, k - 1)] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[idx(k, j)] + q * a[idx(k + 1, j)];
                        if k + 1 != nu {
                            pp += r * a[idx(k + 2, j)];
                            a[idx(k + 2, j)] -= pp * z;
                        }
                        a[idx(k + 1, j)] -= pp * y;
                        a[idx(k, j)] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a[idx(i, k)] + y * a[idx(i, k + 1)];
                        if k + 1 != nu {
                            pp += z * a[idx(i, k + 2)];
                            a[idx(i, k + 2)] -= pp * r;
                        }
                        a[idx(i, k + 1)] -= pp * q;
                        a[idx(i, k)] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(r, i)| Complex64::new(r, i)).collect())
}

/// Eigenvector of `a` for the eigenvalue estimate `lambda` by inverse
/// iteration on the complex shifted matrix.
fn inverse_iteration(n: usize, a: &[f64], lambda: Complex64, anorm: f64) -> Vec<Complex64> {
    let mut eps = 1e-12 * anorm.max(1e-300);
    let lu = loop {
        let shift = lambda + Complex64::new(eps, 0.0);
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { shift } else { Complex64::new(0.0, 0.0) };
                m.push(Complex64::new(a[i * n + j], 0.0) - d);
            }
        }
        match Lu::factor(n, m) {
            Ok(lu) => break lu,
            Err(_) => eps *= 10.0,
        }
    };
    let mut x: Vec<Complex64> =
        (0..n).map(|i| Complex64::new(1.0 + 0.1 * i as f64, 0.05 * (i as f64 - 2.0))).collect();
    for _ in 0..3 {
        lu.solve_in_place(&mut x);
        let nrm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !nrm.is_finite() || nrm == 0.0 {
            break;
        }
        x.iter_mut().for_each(|c| *c /= nrm);
    }
    normalize_phase(&mut x);
    x
}

/// Unit 2-norm with the largest-magnitude entry rotated onto the positive
/// real axis.
pub fn normalize_phase(x: &mut [Complex64]) {
    let nrm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if nrm == 0.0 || !nrm.is_finite() {
        return;
    }
    let mut big = x[0];
    for &c in x.iter() {
        if c.norm() > big.norm() * (1.0 + 1e-12) {
            big = c;
        }
    }
    let phase = big.conj() / big.norm();
    x.iter_mut().for_each(|c| *c = *c * phase / nrm);
}

/// Eigenvalues (sorted by |Re| descending) and eigenvectors of a dense real
/// n×n row-major matrix.
pub fn eigen(n: usize, a: &[f64]) -> Result<EigenDecomposition> {
    assert_eq!(a.len(), n * n);
    if a.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::InvalidParameter("matrix has non-finite entries".into()));
    }
    let mut h = a.to_vec();
    hessenberg(n, &mut h);
    let mut values = hqr(n, &mut h)?;
    values.sort_by(|x, y| {
        y.re.abs().partial_cmp(&x.re.abs()).unwrap_or(std::cmp::Ordering::Equal).then(y.im.partial_cmp(&x.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    let anorm = inf_norm(n, a);
    let vectors = values.iter().map(|&l| inverse_iteration(n, a, l, anorm)).collect();
    Ok(EigenDecomposition { values, vectors })
}

pub fn eigen6(a: &[[f64; 6]; 6]) -> Result<EigenDecomposition> {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    eigen(6, &flat)
}
