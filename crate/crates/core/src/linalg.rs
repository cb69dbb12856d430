//! Dense kernels on [`Tensor`] matrices: products, small factorizations, SVD.
//!
//! Products go through `matrixmultiply` (single-threaded, fixed blocking) so
//! results are bitwise reproducible for a given input.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Condition estimate above which a factorization is reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy)]
enum Side {
    Plain,
    Transposed,
}

fn gemm(a: &Tensor, ta: Side, b: &Tensor, tb: Side, op: &'static str) -> Result<Tensor> {
    let (ar, ac) = a.rc();
    let (br, bc) = b.rc();
    let (m, k, rsa, csa) = match ta {
        Side::Plain => (ar, ac, ac as isize, 1),
        Side::Transposed => (ac, ar, 1, ac as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Side::Plain => (br, bc, bc as isize, 1),
        Side::Transposed => (bc, br, 1, bc as isize),
    };
    if k != k2 {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
    // whose lengths are m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Side::Plain, b, Side::Plain, "matmul")
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Side::Transposed, b, Side::Plain, "matmul")
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Side::Plain, b, Side::Transposed, "matmul")
}

/// Elementwise `sign(y)·max(|y|−ζ, 0)`.
#[inline]
pub fn shrink(y: f64, zeta: f64) -> f64 {
    let m = y.abs() - zeta;
    if m > 0.0 {
        m.copysign(y)
    } else {
        0.0
    }
}

pub fn soft_threshold(y: &Tensor, zeta: f64) -> Result<Tensor> {
    if !(zeta >= 0.0) {
        return Err(Error::Domain(format!("soft-threshold level {zeta} is negative")));
    }
    Ok(y.map(|v| shrink(v, zeta)))
}

/// LU factorization with partial (row) pivoting of a square matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    condition: f64,
}

impl Lu {
    pub fn new(a: &Tensor, op: &'static str) -> Result<Self> {
        let (n, c) = a.rc();
        if n != c {
            return Err(Error::Contract(format!(
                "{op} needs a square matrix, got {}",
                a.shape()
            )));
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut p = col;
            let mut best = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > best {
                    best = v;
                    p = row;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular {
                    op,
                    condition: f64::INFINITY,
                });
            }
            if p != col {
                for j in 0..n {
                    lu.swap(col * n + j, p * n + j);
                }
                perm.swap(col, p);
            }
            let pivot = lu[col * n + col];
            for row in col + 1..n {
                let f = lu[row * n + col] / pivot;
                lu[row * n + col] = f;
                if f != 0.0 {
                    let (top, bottom) = lu.split_at_mut(row * n);
                    let src = &top[col * n + col + 1..col * n + n];
                    let dst = &mut bottom[col + 1..n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d -= f * s;
                    }
                }
            }
        }
        let diag = (0..n).map(|i| lu[i * n + i].abs());
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let condition = hi / lo;
        if condition > MAX_CONDITION {
            return Err(Error::Singular { op, condition });
        }
        Ok(Lu { n, lu, perm, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves `A X = B` for `B` with `n` rows.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        let (br, m) = b.rc();
        if br != n {
            return Err(Error::Dimension {
                op: "solve",
                lhs: crate::tensor::Shape::matrix(n, n),
                rhs: b.shape().clone(),
            });
        }
        let src = b.data();
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&src[p * m..(p + 1) * m]);
        }
        // forward substitution with unit-lower L
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let row = &mut rest[..m];
            for j in 0..i {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    for (r, s) in row.iter_mut().zip(&done[j * m..(j + 1) * m]) {
                        *r -= f * s;
                    }
                }
            }
        }
        // back substitution with U
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let row = &mut head[i * m..];
            for j in i + 1..n {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    let s = &tail[(j - i - 1) * m..(j - i) * m];
                    for (r, sv) in row.iter_mut().zip(s) {
                        *r -= f * sv;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for r in row.iter_mut() {
                *r /= d;
            }
        }
        Tensor::from_vec(&[n, m], x)
    }

    /// Solves `Aᵀ X = B`.
    pub fn solve_transposed(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        let (br, m) = b.rc();
        if br != n {
            return Err(Error::Dimension {
                op: "solve",
                lhs: crate::tensor::Shape::matrix(n, n),
                rhs: b.shape().clone(),
            });
        }
        // PA = LU gives Aᵀ = Uᵀ Lᵀ P: solve Uᵀ W = B, Lᵀ Z = W, then X = Pᵀ Z.
        let mut w = b.data().to_vec();
        for i in 0..n {
            let (done, rest) = w.split_at_mut(i * m);
            let row = &mut rest[..m];
            for j in 0..i {
                let f = self.lu[j * n + i];
                if f != 0.0 {
                    for (r, s) in row.iter_mut().zip(&done[j * m..(j + 1) * m]) {
                        *r -= f * s;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for r in row.iter_mut() {
                *r /= d;
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = w.split_at_mut((i + 1) * m);
            let row = &mut head[i * m..];
            for j in i + 1..n {
                let f = self.lu[j * n + i];
                if f != 0.0 {
                    let s = &tail[(j - i - 1) * m..(j - i) * m];
                    for (r, sv) in row.iter_mut().zip(s) {
                        *r -= f * sv;
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&w[i * m..(i + 1) * m]);
        }
        Tensor::from_vec(&[n, m], x)
    }
}

/// Factorization of a small symmetric Gram matrix `MᵀM`.
#[derive(Clone, Debug)]
pub enum GramFactor {
    Cholesky { r: usize, l: Vec<f64>, condition: f64 },
    Pivoted(Lu),
}

impl GramFactor {
    pub fn new(gram: &Tensor) -> Result<Self> {
        match cholesky(gram) {
            Some((l, condition)) => {
                if condition > MAX_CONDITION {
                    return Err(Error::Singular {
                        op: "gram_solve",
                        condition,
                    });
                }
                Ok(GramFactor::Cholesky {
                    r: gram.rc().0,
                    l,
                    condition,
                })
            }
            None => Lu::new(gram, "gram_solve").map(GramFactor::Pivoted),
        }
    }

    pub fn condition(&self) -> f64 {
        match self {
            GramFactor::Cholesky { condition, .. } => *condition,
            GramFactor::Pivoted(lu) => lu.condition(),
        }
    }

    /// Right solve: returns `Z` with `Z · A = G` where `A` is the factored Gram.
    pub fn right_solve(&self, g: &Tensor) -> Result<Tensor> {
        match self {
            GramFactor::Cholesky { r, l, .. } => {
                let r = *r;
                let (rows, cols) = g.rc();
                if cols != r {
                    return Err(Error::Dimension {
                        op: "gram_solve",
                        lhs: crate::tensor::Shape::matrix(r, r),
                        rhs: g.shape().clone(),
                    });
                }
                // A symmetric: Z A = G  <=>  A Zᵀ = Gᵀ, solved row by row of G.
                let mut out = g.data().to_vec();
                for row in out.chunks_mut(r) {
                    for i in 0..r {
                        let mut s = row[i];
                        for j in 0..i {
                            s -= l[i * r + j] * row[j];
                        }
                        row[i] = s / l[i * r + i];
                    }
                    for i in (0..r).rev() {
                        let mut s = row[i];
                        for j in i + 1..r {
                            s -= l[j * r + i] * row[j];
                        }
                        row[i] = s / l[i * r + i];
                    }
                }
                Tensor::from_vec(&[rows, cols], out)
            }
            GramFactor::Pivoted(lu) => {
                // Z A = G  <=>  Aᵀ Zᵀ = Gᵀ
                Ok(lu.solve_transposed(&g.transpose())?.transpose())
            }
        }
    }
}

/// Lower Cholesky factor and a diagonal-ratio condition estimate, or `None`
/// when the matrix is not numerically positive definite.
fn cholesky(a: &Tensor) -> Option<(Vec<f64>, f64)> {
    let (n, c) = a.rc();
    if n != c {
        return None;
    }
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = src[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let (lo, hi) = (0..n)
        .map(|i| l[i * n + i])
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let ratio = hi / lo;
    Some((l, ratio * ratio))
}

/// `G · (MᵀM)⁻¹` without forming the inverse.
pub fn gram_solve(m: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, r) = m.rc();
    if g.rc().1 != r {
        return Err(Error::dim("gram_solve", m.shape(), g.shape()));
    }
    let gram = matmul_tn(m, m)?;
    GramFactor::new(&gram)?.right_solve(g)
}

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.rc();
    DMatrix::from_row_slice(r, c, t.data())
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_vec(&[r, c], data).expect("shape from nalgebra")
}

/// Singular values in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let m = to_dmatrix(a);
    let svd = m
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Rank-`r` truncated SVD: `(U_r, σ_r, V_r)` with `U_r: m×r`, `V_r: n×r`.
pub fn truncated_svd(a: &Tensor, r: usize) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (rows, cols) = a.rc();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::Domain(format!("rank {r} outside 1..={}", rows.min(cols))));
    }
    let m = to_dmatrix(a);
    let svd = m
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .total_cmp(&svd.singular_values[i])
            .then(i.cmp(&j))
    });
    let mut ur = Tensor::zeros(&[rows, r]);
    let mut vr = Tensor::zeros(&[cols, r]);
    let mut sr = Vec::with_capacity(r);
    for (col, &idx) in order.iter().take(r).enumerate() {
        sr.push(svd.singular_values[idx]);
        for i in 0..rows {
            ur.set(i, col, u[(i, idx)]);
        }
        for j in 0..cols {
            vr.set(j, col, v_t[(idx, j)]);
        }
    }
    Ok((ur, sr, vr))
}

/// Orthogonal factor of a QR decomposition, with signs fixed so that the
/// triangular factor has a nonnegative diagonal.
pub fn orthogonal_factor(a: &Tensor) -> Tensor {
    let qr = to_dmatrix(a).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::from_vec(&[4, 3], lcg(12, 1)).unwrap();
        let b = Tensor::from_vec(&[4, 5], lcg(20, 2)).unwrap();
        let tn = matmul_tn(&a, &b).unwrap();
        let explicit = matmul(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&explicit) < 1e-15);
        let c = Tensor::from_vec(&[5, 3], lcg(15, 3)).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &c.transpose()).unwrap()) < 1e-15);
    }

    #[test]
    fn lu_solves_both_orientations() {
        let mut a = Tensor::from_vec(&[6, 6], lcg(36, 7)).unwrap();
        for i in 0..6 {
            a.set(i, i, a.at(i, i) + 2.0);
        }
        let b = Tensor::from_vec(&[6, 2], lcg(12, 8)).unwrap();
        let lu = Lu::new(&a, "solve").unwrap();
        let x = lu.solve(&b).unwrap();
        assert!(matmul(&a, &x).unwrap().max_abs_diff(&b) < 1e-12);
        let xt = lu.solve_transposed(&b).unwrap();
        assert!(matmul_tn(&a, &xt).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(Lu::new(&a, "solve"), Err(Error::Singular { .. })));
        let m = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let err = gram_solve(&m, &m).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err}");
    }

    #[test]
    fn indefinite_gram_falls_back_to_pivoting() {
        // not a Gram matrix, but exercises the fallback path
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let f = GramFactor::new(&a).unwrap();
        assert!(matches!(f, GramFactor::Pivoted(_)));
        let g = Tensor::from_rows(&[&[3.0, 5.0]]);
        let z = f.right_solve(&g).unwrap();
        assert!(matmul(&z, &a).unwrap().max_abs_diff(&g) < 1e-15);
    }

    #[test]
    fn truncated_svd_reconstructs_low_rank() {
        let a = Tensor::from_vec(&[8, 2], lcg(16, 4)).unwrap();
        let b = Tensor::from_vec(&[6, 2], lcg(12, 5)).unwrap();
        let m = matmul_nt(&a, &b).unwrap();
        let (u, s, v) = truncated_svd(&m, 2).unwrap();
        let mut us = u.clone();
        for i in 0..8 {
            for j in 0..2 {
                us.set(i, j, u.at(i, j) * s[j]);
            }
        }
        let rec = matmul_nt(&us, &v).unwrap();
        assert!(rec.max_abs_diff(&m) < 1e-12);
        assert!(s[0] >= s[1]);
    }

    #[test]
    fn orthogonal_factor_is_orthogonal() {
        let a = Tensor::from_vec(&[7, 7], lcg(49, 9)).unwrap();
        let q = orthogonal_factor(&a);
        let qtq = matmul_tn(&q, &q).unwrap();
        assert!(qtq.sub(&Tensor::eye(7)).unwrap().frobenius() < 1e-12);
    }
}
