//! Sparse and banded linear algebra for the discretized problems.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; entries in a row are
    /// sorted by column and duplicates summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in r {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_rows: row_ptr.len() - 1,
            n_cols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            for (c, v) in self.row(i) {
                rows[c].push((i, v));
            }
        }
        Self::from_rows(self.n_rows, rows)
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Half bandwidths `(lower, upper)`.
    pub fn bandwidth(&self) -> (usize, usize) {
        let mut lo = 0;
        let mut up = 0;
        for i in 0..self.n_rows {
            for (c, _) in self.row(i) {
                if c < i {
                    lo = lo.max(i - c);
                } else {
                    up = up.max(c - i);
                }
            }
        }
        (lo, up)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] += v;
            }
        }
        d
    }
}

/// `||b - A x||_inf / (||A||_inf ||x||_inf + ||b||_inf)`.
pub fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    let r = ax
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (u, v)| m.max((v - u).abs()));
    let scale = a.norm_inf() * sup(x) + sup(b);
    if scale == 0.0 {
        r
    } else {
        r / scale
    }
}

pub fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Relaxed Gauss-Seidel in lexicographic row order. Starts from `x`.
pub fn gauss_seidel(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    relaxation: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(usize, f64)> {
    let n = a.n_rows;
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    if let Some(row) = diag.iter().position(|&d| d == 0.0) {
        return Err(Error::SingularMatrix { row });
    }
    let mut res = relative_residual(a, x, b);
    if res <= tol {
        return Ok((0, res));
    }
    for it in 1..=max_iter {
        for i in 0..n {
            let mut s = b[i];
            for (c, v) in a.row(i) {
                if c != i {
                    s -= v * x[c];
                }
            }
            x[i] += relaxation * (s / diag[i] - x[i]);
        }
        res = relative_residual(a, x, b);
        if res <= tol {
            return Ok((it, res));
        }
        if !res.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        max_iter,
        residual: res,
    })
}

/// Band matrix with `lo` sub- and `up` super-diagonals, stored row-wise.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    pub n: usize,
    pub lo: usize,
    pub up: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lo: usize, up: usize) -> Self {
        Self {
            n,
            lo,
            up,
            data: vec![0.0; n * (lo + up + 1)],
        }
    }

    pub fn from_csr(a: &CsrMatrix) -> Self {
        let (lo, up) = a.bandwidth();
        let mut m = Self::zeros(a.n_rows, lo, up);
        for i in 0..a.n_rows {
            for (c, v) in a.row(i) {
                *m.at_mut(i, c) += v;
            }
        }
        m
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.lo + self.up + 1) + (j + self.lo - i)
    }
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }
    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }
    #[inline]
    fn row_span(&self, i: usize) -> (usize, usize) {
        (i.saturating_sub(self.lo), (i + self.up).min(self.n - 1))
    }
}

/// In-place band LU without pivoting. Suitable for nonsingular M-matrices.
#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandMatrix,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let mut m = BandMatrix::from_csr(a);
        let n = m.n;
        let w = m.lo + m.up + 1;
        for k in 0..n {
            let piv = m.at(k, k);
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::SingularMatrix { row: k });
            }
            let (_, kend) = m.row_span(k);
            let i_end = (k + m.lo).min(n - 1);
            for i in k + 1..=i_end {
                let ik = m.idx(i, k);
                let l = m.data[ik];
                if l == 0.0 {
                    continue;
                }
                let l = l / piv;
                m.data[ik] = l;
                // Row k and row i share the column range k+1..=kend.
                let base_k = k * w + m.lo - k;
                let base_i = i * w + m.lo - i;
                for j in k + 1..=kend {
                    m.data[base_i + j] -= l * m.data[base_k + j];
                }
            }
        }
        Ok(Self { m })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let n = m.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let (s, _) = m.row_span(i);
            let mut acc = x[i];
            for j in s..i {
                acc -= m.at(i, j) * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let (_, e) = m.row_span(i);
            let mut acc = x[i];
            for j in i + 1..=e {
                acc -= m.at(i, j) * x[j];
            }
            x[i] = acc / m.at(i, i);
        }
        x
    }
}

/// Stationary distribution `pi Q = 0, sum pi = 1` of a generator `Q`
/// (nonnegative off-diagonals, zero row sums) by banded state reduction.
/// The elimination uses only off-diagonal sums, so no cancellation occurs.
pub fn stationary_distribution(q: &CsrMatrix) -> Result<Vec<f64>> {
    let mut m = BandMatrix::from_csr(q);
    let n = m.n;
    let w = m.lo + m.up + 1;
    let mut out_rate = vec![0.0; n];
    for k in 0..n {
        let (_, kend) = m.row_span(k);
        let s: f64 = (k + 1..=kend).map(|j| m.at(k, j)).sum();
        if n > 1 && k + 1 < n && s <= 0.0 {
            return Err(Error::SingularMatrix { row: k });
        }
        out_rate[k] = s;
        let i_end = (k + m.lo).min(n - 1);
        for i in k + 1..=i_end {
            let ik = m.idx(i, k);
            let a = m.data[ik];
            if a == 0.0 {
                continue;
            }
            let f = a / s;
            let base_k = k * w + m.lo - k;
            let base_i = i * w + m.lo - i;
            for j in k + 1..=kend {
                if j != i {
                    m.data[base_i + j] += f * m.data[base_k + j];
                }
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[n - 1] = 1.0;
    for k in (0..n.saturating_sub(1)).rev() {
        let i_end = (k + m.lo).min(n - 1);
        let mut acc = 0.0;
        for i in k + 1..=i_end {
            acc += pi[i] * m.at(i, k);
        }
        pi[k] = acc / out_rate[k];
    }
    let total: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= total;
    }
    Ok(pi)
}

/// Dense LU with partial pivoting; reference solver for small systems.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))
            .unwrap();
        if m[p][k] == 0.0 {
            return Err(Error::SingularMatrix { row: k });
        }
        m.swap(k, p);
        x.swap(k, p);
        for i in k + 1..n {
            let l = m[i][k] / m[k][k];
            if l == 0.0 {
                continue;
            }
            for j in k..n {
                m[i][j] -= l * m[k][j];
            }
            x[i] -= l * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc -= m[i][j] * x[j];
        }
        x[i] = acc / m[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 2.0)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(n, rows)
    }

    #[test]
    fn laplacian_gives_linear_interpolation() {
        // u_0 = 0, u_{n+1} = 1 folded into the rhs.
        let n = 9;
        let a = tridiag(n);
        let mut b = vec![0.0; n];
        b[n - 1] = 1.0;
        let x = BandedLu::factor(&a).unwrap().solve(&b);
        for (i, v) in x.iter().enumerate() {
            assert!((v - (i + 1) as f64 / (n + 1) as f64).abs() < 1e-14);
        }
        let mut y = vec![0.0; n];
        gauss_seidel(&a, &b, &mut y, 1.5, 1e-13, 10_000).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn two_state_stationary() {
        let q = CsrMatrix::from_rows(2, vec![vec![(0, -1.0), (1, 1.0)], vec![(0, 3.0), (1, -3.0)]]);
        let pi = stationary_distribution(&q).unwrap();
        assert!((pi[0] - 0.75).abs() < 1e-15);
        assert!((pi[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = CsrMatrix::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, 3.0)], vec![(0, 4.0)]]);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 0), 2.0);
    }

    /// Random strictly diagonally dominant M-matrix with band structure.
    fn m_matrix(n: usize, band: usize, seed: &[f64]) -> CsrMatrix {
        let mut t = 0;
        let mut next = || {
            t += 1;
            seed[t % seed.len()]
        };
        let rows = (0..n)
            .map(|i| {
                let mut r = Vec::new();
                let mut s = 0.0;
                for j in i.saturating_sub(band)..=(i + band).min(n - 1) {
                    if j != i {
                        let v = next();
                        s += v;
                        r.push((j, -v));
                    }
                }
                r.push((i, s + 0.1 + next()));
                r
            })
            .collect();
        CsrMatrix::from_rows(n, rows)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn banded_lu_matches_dense(
            n in 5usize..60,
            band in 1usize..6,
            coefs in prop::collection::vec(0.0f64..1.0, 20),
            rhs in prop::collection::vec(-1.0f64..1.0, 60),
        ) {
            let a = m_matrix(n, band, &coefs);
            let b = &rhs[..n];
            let x = BandedLu::factor(&a).unwrap().solve(b);
            let y = dense_solve(&a.to_dense(), b).unwrap();
            for (u, v) in x.iter().zip(&y) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }

        #[test]
        fn stationary_solves_balance(
            n in 2usize..40,
            band in 1usize..5,
            coefs in prop::collection::vec(0.01f64..1.0, 17),
        ) {
            // Off-diagonal rates from the M-matrix pattern; diagonal balances.
            let a = m_matrix(n, band, &coefs);
            let rows = (0..n).map(|i| {
                let mut r: Vec<(usize, f64)> = a.row(i).filter(|e| e.0 != i).map(|(c, v)| (c, -v)).collect();
                let s: f64 = r.iter().map(|e| e.1).sum();
                r.push((i, -s));
                r
            }).collect();
            let q = CsrMatrix::from_rows(n, rows);
            let pi = stationary_distribution(&q).unwrap();
            let qt = q.transpose();
            let r = qt.matvec(&pi);
            prop_assert!(sup(&r) < 1e-12);
            prop_assert!(pi.iter().all(|&p| p > 0.0));
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        }
    }
}
