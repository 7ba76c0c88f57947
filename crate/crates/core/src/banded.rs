//! Banded LU without pivoting, for diagonally dominant M-matrices of the
//! form I - P with P substochastic.

#[derive(Debug, Clone)]
pub(crate) struct BandedLu {
    n: usize,
    bw: usize,
    width: usize,
    /// Row-major band storage; entry (r, c) lives at r * width + c + bw - r.
    band: Vec<f64>,
}

impl BandedLu {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        let width = 2 * bw + 1;
        BandedLu {
            n,
            bw,
            width,
            band: vec![0.0; n * width],
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + c + self.bw - r
    }

    #[inline]
    pub(crate) fn add(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r.abs_diff(c) <= self.bw);
        let i = self.at(r, c);
        self.band[i] += v;
    }

    #[inline]
    pub(crate) fn get(&self, r: usize, c: usize) -> f64 {
        self.band[self.at(r, c)]
    }

    /// Replaces row `r` by the identity row.
    pub(crate) fn pin_row(&mut self, r: usize) {
        let lo = r.saturating_sub(self.bw);
        let hi = (r + self.bw).min(self.n - 1);
        for c in lo..=hi {
            let i = self.at(r, c);
            self.band[i] = 0.0;
        }
        let i = self.at(r, r);
        self.band[i] = 1.0;
    }

    /// In-place Doolittle factorization.
    pub(crate) fn factor(&mut self) {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.get(k, k);
            let end = (k + bw + 1).min(n);
            for i in k + 1..end {
                let ik = self.at(i, k);
                let a = self.band[ik];
                if a == 0.0 {
                    continue;
                }
                let l = a / pivot;
                self.band[ik] = l;
                let base_i = self.at(i, 0) as isize;
                let base_k = self.at(k, 0) as isize;
                for j in k + 1..end {
                    let ukj = self.band[(base_k + j as isize) as usize];
                    if ukj != 0.0 {
                        self.band[(base_i + j as isize) as usize] -= l * ukj;
                    }
                }
            }
        }
    }

    /// Solves A x = b in place.
    pub(crate) fn solve(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut acc = x[i];
            for k in lo..i {
                acc -= self.get(i, k) * x[k];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut acc = x[i];
            for j in i + 1..hi {
                acc -= self.get(i, j) * x[j];
            }
            x[i] = acc / self.get(i, i);
        }
    }

    /// Solves A^T x = b in place.
    pub(crate) fn solve_transpose(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        // U^T z = b
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut acc = x[i];
            for k in lo..i {
                acc -= self.get(k, i) * x[k];
            }
            x[i] = acc / self.get(i, i);
        }
        // L^T x = z
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut acc = x[i];
            for k in i + 1..hi {
                acc -= self.get(k, i) * x[k];
            }
            x[i] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> (BandedLu, Vec<Vec<f64>>) {
        let mut lu = BandedLu::zeros(n, 1);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            lu.add(i, i, 1.0);
            dense[i][i] = 1.0;
            if i > 0 {
                lu.add(i, i - 1, -0.3);
                dense[i][i - 1] = -0.3;
            }
            if i + 1 < n {
                lu.add(i, i + 1, -0.45);
                dense[i][i + 1] = -0.45;
            }
        }
        (lu, dense)
    }

    #[test]
    fn solves_and_transposed_solves_match_dense_products() {
        let n = 7;
        let (mut lu, dense) = tridiag(n);
        lu.factor();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut x = b.clone();
        lu.solve(&mut x);
        for i in 0..n {
            let ax: f64 = (0..n).map(|j| dense[i][j] * x[j]).sum();
            assert!((ax - b[i]).abs() < 1e-12);
        }
        let mut y = b.clone();
        lu.solve_transpose(&mut y);
        for j in 0..n {
            let aty: f64 = (0..n).map(|i| dense[i][j] * y[i]).sum();
            assert!((aty - b[j]).abs() < 1e-12);
        }
    }
}
