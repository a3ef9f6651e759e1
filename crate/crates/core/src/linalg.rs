//! Compressed sparse rows, reverse Cuthill–McKee ordering and an envelope
//! (skyline) Cholesky factorization for the assembled pencils.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square sparse matrix in CSR form with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Accumulates `(row, col, value)` contributions; duplicates are summed in
/// insertion order, so the result does not depend on anything but the
/// sequence of pushes.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.n && c < self.n);
        self.entries.push((r, c, v));
    }

    pub fn build(mut self) -> CsrMatrix {
        // stable sort keeps insertion order among duplicates
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; self.n + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// Rows holding at least one stored entry that is not exactly zero.
    pub fn nonzero_rows(&self) -> Vec<bool> {
        (0..self.n).map(|i| self.row(i).any(|(_, v)| v != 0.0)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    /// `Xᵀ · self · Y` for dense column blocks.
    pub fn sandwich(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut ay = DMatrix::zeros(self.n, y.ncols());
        for c in 0..y.ncols() {
            let col = self.mul_vec(y.column(c).as_slice());
            ay.set_column(c, &DVector::from_vec(col));
        }
        x.transpose() * ay
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        CsrMatrix {
            vals: self.vals.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    /// `self + c·other` over the union of both patterns.
    pub fn add_scaled(&self, c: f64, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut row_ptr = vec![0; self.n + 1];
        let mut cols = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut vals = Vec::with_capacity(cols.capacity());
        for i in 0..self.n {
            let mut a = self.row(i).peekable();
            let mut b = other.row(i).peekable();
            loop {
                let next = match (a.peek(), b.peek()) {
                    (None, None) => break,
                    (Some(&(ja, va)), Some(&(jb, vb))) if ja == jb => {
                        a.next();
                        b.next();
                        (ja, va + c * vb)
                    }
                    (Some(&(ja, va)), Some(&(jb, _))) if ja < jb => {
                        a.next();
                        (ja, va)
                    }
                    (Some(&(ja, va)), None) => {
                        a.next();
                        (ja, va)
                    }
                    (_, Some(&(jb, vb))) => {
                        b.next();
                        (jb, c * vb)
                    }
                };
                cols.push(next.0);
                vals.push(next.1);
            }
            row_ptr[i + 1] = cols.len();
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.iter()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            d[(i, j)] += v;
        }
        d
    }

    /// Principal submatrix on `rows × cols` (index lists), as dense.
    pub fn dense_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &c) in cols.iter().enumerate() {
            pos[c] = k;
        }
        let mut d = DMatrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    d[(r, pos[j])] = v;
                }
            }
        }
        d
    }

    /// Sparse principal submatrix on the given index list.
    pub fn submatrix(&self, idx: &[usize]) -> CsrMatrix {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let mut b = TripletBuilder::new(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if pos[j] != usize::MAX {
                    b.push(r, pos[j], v);
                }
            }
        }
        b.build()
    }

    /// Coordinate text, one `row col value` line per stored entry.
    pub fn to_coo_text(&self) -> String {
        let mut s = String::with_capacity(self.nnz() * 32);
        for (i, j, v) in self.iter() {
            let _ = writeln!(s, "{i} {j} {v:.17e}");
        }
        s
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric pattern; `order[k]` is
/// the original index placed at position `k`.
pub fn rcm_order(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut Vec<bool>, out: &mut Vec<usize>| -> Vec<usize> {
        // returns the level of each vertex reached (as a list of last-level vertices)
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        let first = out.len();
        while let Some(v) = queue.pop_front() {
            out.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
        out[first..].to_vec()
    };
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start: repeat BFS from the farthest vertex a few times
        let mut start = seed;
        for _ in 0..4 {
            let mut tmp_vis = visited.clone();
            let mut tmp = Vec::new();
            let reached = bfs(start, &mut tmp_vis, &mut tmp);
            let far = *reached.last().unwrap();
            if far == start {
                break;
            }
            start = far;
        }
        bfs(start, &mut visited, &mut order);
    }
    order.reverse();
    order
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` stored row-wise over each row's envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    order: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let order = rcm_order(a);
        Self::factor_ordered(a, order)
    }

    pub fn factor_ordered(a: &CsrMatrix, order: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let mut inv = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            inv[i] = k;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (k, &i) in order.iter().enumerate() {
            for (j, _) in a.row(i) {
                first[k] = first[k].min(inv[j]);
            }
        }
        let mut start = vec![0; n + 1];
        for k in 0..n {
            start[k + 1] = start[k] + (k - first[k] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for (k, &i) in order.iter().enumerate() {
            for (j, v) in a.row(i) {
                let c = inv[j];
                if c <= k {
                    data[start[k] + c - first[k]] += v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            for j in fi..i {
                let fj = first[j];
                let sj = start[j];
                let lo = fi.max(fj);
                let mut s = data[si + j - fi];
                let (ri, rj) = (&data[si + lo - fi..si + j - fi], &data[sj + lo - fj..sj + j - fj]);
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                data[si + j - fi] = s / data[sj + j - fj];
            }
            let row = &data[si..si + i - fi];
            let d = data[si + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Coercivity(format!(
                    "Cholesky pivot {d:e} at row {} (original index {})",
                    i, order[i]
                )));
            }
            data[si + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            order,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Stored envelope size (number of factor entries).
    pub fn envelope(&self) -> usize {
        self.data.len()
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let mut y: Vec<f64> = self.order.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            let (fi, si) = (self.first[i], self.start[i]);
            let row = &self.data[si..si + i - fi];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let (fi, si) = (self.first[i], self.start[i]);
            y[i] /= self.data[si + i - fi];
            let yi = y[i];
            for (k, l) in self.data[si..si + i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        for (k, &i) in self.order.iter().enumerate() {
            b[i] = y[k];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.push(i, i, 2.0 + shift);
            if i + 1 < n {
                b.push(i, i + 1, -1.0);
                b.push(i + 1, i, -1.0);
            }
        }
        b.build()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut b = TripletBuilder::new(2);
        b.push(0, 0, 1.0);
        b.push(1, 0, 2.0);
        b.push(0, 0, 0.5);
        let m = b.build();
        assert_eq!(m.get(0, 0), 1.5);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_coo_text().lines().count(), 2);
    }

    #[test]
    fn add_scaled_merges_patterns() {
        let a = laplacian_1d(4, 0.0);
        let mut b = TripletBuilder::new(4);
        b.push(0, 3, 1.0);
        b.push(3, 0, 1.0);
        let s = a.add_scaled(2.0, &b.build());
        assert_eq!(s.get(0, 3), 2.0);
        assert_eq!(s.get(1, 1), 2.0);
        assert_eq!(s.asymmetry(), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplacian_1d(5, -3.0);
        assert!(matches!(EnvelopeCholesky::factor(&a), Err(Error::Coercivity(_))));
    }

    proptest! {
        #[test]
        fn cholesky_solves_random_spd(seed in 0u64..200, n in 2usize..30) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut b = TripletBuilder::new(n);
            for i in 0..n {
                b.push(i, i, 1.0);
            }
            for _ in 0..2 * n {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                let v: f64 = rng.random_range(-1.0..1.0);
                // B Bᵀ-type contributions keep the matrix SPD
                b.push(i, i, v * v);
                b.push(j, j, v * v);
                if i != j {
                    b.push(i, j, v * v);
                    b.push(j, i, v * v);
                } else {
                    b.push(i, i, 2.0 * v * v);
                }
            }
            let a = b.build();
            let f = EnvelopeCholesky::factor(&a).unwrap();
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&rhs);
            let r = a.mul_vec(&x);
            for i in 0..n {
                prop_assert!((r[i] - rhs[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rcm_is_a_permutation_and_shrinks_envelope() {
        // a long cycle numbered badly
        let n = 60;
        let lab = |i: usize| (i * 17) % n;
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.push(lab(i), lab(i), 3.0);
            b.push(lab(i), lab((i + 1) % n), -1.0);
            b.push(lab((i + 1) % n), lab(i), -1.0);
        }
        let a = b.build();
        let mut o = rcm_order(&a);
        let natural = EnvelopeCholesky::factor_ordered(&a, (0..n).collect()).unwrap();
        let rcm = EnvelopeCholesky::factor(&a).unwrap();
        assert!(rcm.envelope() < natural.envelope());
        o.sort();
        assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
}
