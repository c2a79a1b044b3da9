//! Small dense complex linear algebra on top of `nalgebra`.
//!
//! Everything here works on dynamically sized matrices; quantum dimensions in
//! this crate are small (2 to a few tens), so clarity wins over blocking.

use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage, SymmetricEigen};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Pauli matrices (σ₁, σ₂, σ₃) with σ₃ = diag(1, −1), so |0⟩ is the +1 eigenvector of σ₃.
pub fn pauli() -> [CMat; 3] {
    let z = cr(0.0);
    let o = cr(1.0);
    [
        CMat::from_row_slice(2, 2, &[z, o, o, z]),
        CMat::from_row_slice(2, 2, &[z, -I, I, z]),
        CMat::from_row_slice(2, 2, &[o, z, z, -o]),
    ]
}

/// Lowering operator σ₋ = |1⟩⟨0|: maps the σ₃ = +1 state |0⟩ (excited) to |1⟩ (ground).
pub fn sigma_minus() -> CMat {
    let mut m = CMat::zeros(2, 2);
    m[(1, 0)] = cr(1.0);
    m
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn basis(n: usize, k: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[k] = cr(1.0);
    v
}

pub fn to_complex(m: &RMat) -> CMat {
    m.map(cr)
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

/// Largest entrywise deviation from Hermiticity, `max |M − M†|`.
pub fn hermitian_asymmetry(m: &CMat) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn herm(m: &CMat) -> CMat {
    (m + m.adjoint()) * cr(0.5)
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn anticommutator(a: &CMat, b: &CMat) -> CMat {
    a * b + b * a
}

pub fn max_abs<R: Dim, C: Dim, S: RawStorage<C64, R, C>>(m: &Matrix<C64, R, C, S>) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Columns are the eigenvectors, in the order of `values`.
    pub vectors: CMat,
}

impl HermitianEigen {
    pub fn new(m: &CMat) -> Self {
        let n = m.nrows();
        if n == 0 {
            return Self {
                values: Vec::new(),
                vectors: CMat::zeros(0, 0),
            };
        }
        let eig = SymmetricEigen::new(herm(m));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut vectors = CMat::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Rebuild `Σ f(λ_k) v_k v_k†`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> CMat {
        let n = self.values.len();
        let mut out = CMat::zeros(n, n);
        for (k, &lam) in self.values.iter().enumerate() {
            let w = f(lam);
            if w == 0.0 {
                continue;
            }
            let v = self.vectors.column(k);
            out += (v * v.adjoint()) * cr(w);
        }
        out
    }

    /// Number of eigenvalues with `|λ| > tol_rank · max|λ|`.
    pub fn rank(&self, tol_rank: f64) -> usize {
        let cut = tol_rank * self.max_abs();
        if self.max_abs() == 0.0 {
            return 0;
        }
        self.values.iter().filter(|v| v.abs() > cut).count()
    }
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    HermitianEigen::new(m).min()
}

/// Principal square root of a Hermitian positive semi-definite matrix; small
/// negative eigenvalues are clamped to zero.
pub fn sqrt_psd(m: &CMat) -> CMat {
    HermitianEigen::new(m).apply(|l| l.max(0.0).sqrt())
}

/// Numerical rank of a general complex matrix from its singular values.
pub fn rank_general(m: &CMat, tol_rank: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |a, &s| a.max(s));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol_rank * max).count()
}

/// Frobenius norm.
pub fn fro(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `⟨ψ|A|ψ⟩` for a normalized ψ.
pub fn expect(a: &CMat, psi: &CVec) -> C64 {
    psi.dotc(&(a * psi))
}

/// Block matrix `[[a, b], [c, d]]`.
pub fn block2(a: &CMat, b: &CMat, c_: &CMat, d: &CMat) -> CMat {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    let mut out = CMat::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a);
    out.view_mut((0, c1), (r1, c2)).copy_from(b);
    out.view_mut((r1, 0), (r2, c1)).copy_from(c_);
    out.view_mut((r1, c1), (r2, c2)).copy_from(d);
    out
}
