//! Hermitian eigendecomposition by cyclic complex Jacobi rotations, and the
//! spectral functions built on it (inverse square root, PSD square root,
//! Moore–Penrose pseudo-inverse).

use super::matrix::{ComplexMatrix, C64, ZERO};
use crate::error::{Error, Result};

/// Relative tolerance on `max |A - A^H|` accepted as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_CLAMP * ‖A‖_F` are treated as zero.
pub const PSD_CLAMP: f64 = 1e-10;
/// `inv_sqrt` refuses matrices whose eigenvalue ratio falls below this.
pub const MIN_EIG_RATIO: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector of `values[i]`.
    pub vectors: ComplexMatrix,
}

impl HermitianEigen {
    pub fn vector(&self, i: usize) -> Vec<C64> {
        self.vectors.col(i)
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("empty spectrum")
    }

    /// `U f(Λ) U^H`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ComplexMatrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        ComplexMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * mapped[k] * self.vectors[(j, k)].conj())
                .sum()
        })
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        self.map(|l| l)
    }
}

pub fn hermitian_eig(a: &ComplexMatrix) -> Result<HermitianEigen> {
    a.check_hermitian(HERMITIAN_TOL)?;
    let n = a.rows();
    let mut m = a.hermitian_part();
    let mut v = ComplexMatrix::identity(n);
    let total = m.frobenius_norm();

    if total > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)].norm_sqr())
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * total {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(x, x)].re.total_cmp(&m[(y, y)].re));
    let values = order.iter().map(|&k| m[(k, k)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(HermitianEigen { values, vectors })
}

/// One Jacobi step annihilating `m[p][q]`; accumulates the rotation in `v`.
fn rotate(m: &mut ComplexMatrix, v: &mut ComplexMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    let b = apq.norm();
    if b == 0.0 {
        return;
    }
    let app = m[(p, p)].re;
    let aqq = m[(q, q)].re;
    if b < 1e-18 * (app.abs() + aqq.abs()) {
        m[(p, q)] = ZERO;
        m[(q, p)] = ZERO;
        return;
    }
    let phase = apq / b;
    let theta = (aqq - app) / (2.0 * b);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    // J = diag(1, conj(phase)) * [[c, s], [-s, c]] restricted to (p, q).
    let jpp = C64::new(c, 0.0);
    let jpq = C64::new(s, 0.0);
    let jqp = -phase.conj() * s;
    let jqq = phase.conj() * c;

    let n = m.rows();
    for k in 0..n {
        let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
        m[(k, p)] = mkp * jpp + mkq * jqp;
        m[(k, q)] = mkp * jpq + mkq * jqq;
    }
    for k in 0..n {
        let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
        m[(p, k)] = jpp.conj() * mpk + jqp.conj() * mqk;
        m[(q, k)] = jpq.conj() * mpk + jqq.conj() * mqk;
    }
    m[(p, q)] = ZERO;
    m[(q, p)] = ZERO;
    m[(p, p)] = C64::new(m[(p, p)].re, 0.0);
    m[(q, q)] = C64::new(m[(q, q)].re, 0.0);
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = vkp * jpp + vkq * jqp;
        v[(k, q)] = vkp * jpq + vkq * jqq;
    }
}

/// Eigendecomposition of a PSD matrix with small negative eigenvalues clamped to zero.
pub fn psd_eig(a: &ComplexMatrix) -> Result<HermitianEigen> {
    let mut eig = hermitian_eig(a)?;
    let floor = -PSD_CLAMP * a.frobenius_norm();
    for l in &mut eig.values {
        if *l < 0.0 && *l >= floor {
            *l = 0.0;
        }
    }
    Ok(eig)
}

/// `A^{-1/2} = U Λ^{-1/2} U^H` for a well-conditioned PSD `A`.
pub fn inv_sqrt(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let eig = psd_eig(a)?;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= MIN_EIG_RATIO * hi {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::IllConditioned { condition });
    }
    Ok(eig.map(|l| 1.0 / l.sqrt()))
}

/// Principal square root of a PSD matrix.
pub fn sqrt_psd(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(psd_eig(a)?.map(|l| l.max(0.0).sqrt()))
}

/// Numerical rank from the Gram matrix spectrum.
pub fn numerical_rank(a: &ComplexMatrix) -> usize {
    let gram = if a.rows() <= a.cols() { a * &a.adjoint() } else { &a.adjoint() * a };
    let eig = hermitian_eig(&gram.hermitian_part()).expect("Gram matrix is Hermitian");
    let tol = gram_tolerance(&eig, a);
    eig.values.iter().filter(|&&l| l > tol).count()
}

fn gram_tolerance(eig: &HermitianEigen, a: &ComplexMatrix) -> f64 {
    let dim = a.rows().max(a.cols()) as f64;
    eig.max().max(0.0) * dim * 1e-13
}

/// Moore–Penrose pseudo-inverse via the smaller Gram matrix:
/// `A⁺ = A^H (A A^H)⁺` when `m ≤ n`, else `(A^H A)⁺ A^H`.
pub fn pinv(a: &ComplexMatrix) -> ComplexMatrix {
    let ah = a.adjoint();
    let wide = a.rows() <= a.cols();
    let gram = if wide { a * &ah } else { &ah * a };
    let eig = hermitian_eig(&gram.hermitian_part()).expect("Gram matrix is Hermitian");
    let tol = gram_tolerance(&eig, a);
    let gram_pinv = eig.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    if wide {
        &ah * &gram_pinv
    } else {
        &gram_pinv * &ah
    }
}
