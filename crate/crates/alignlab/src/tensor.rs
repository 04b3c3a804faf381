//! Minimal dense matrix support for the model.
//!
//! Parameters are stored in 32-bit floats; a 64-bit instantiation of the same
//! code exists for gradient verification. All reductions run in a fixed
//! order, so results are bitwise reproducible on a given build.

use num_traits::Float;

/// Scalar type the model is generic over (f32 in production, f64 for
/// verification).
pub trait Real:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map_to<G: Real>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }
}

impl<F: Real> std::ops::Index<(usize, usize)> for Mat<F> {
    type Output = F;
    fn index(&self, (r, c): (usize, usize)) -> &F {
        &self.data[r * self.cols + c]
    }
}

impl<F: Real> std::ops::IndexMut<(usize, usize)> for Mat<F> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut F {
        &mut self.data[r * self.cols + c]
    }
}

/// c[m x n] += a[m x k] * b[k x n], row-major slices.
pub fn matmul_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// c[m x k] += a[m x n] * b^T where b is [k x n] (dX = dY * W^T).
pub fn matmul_a_bt_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = F::zero();
            for (&a_ip, &b_jp) in a_row.iter().zip(b_row) {
                acc += a_ip * b_jp;
            }
            *c_ij += acc;
        }
    }
}

/// c[k x n] += a^T * b where a is [m x k], b is [m x n], accumulating in f64
/// (dW = X^T * dY; weight-gradient accumulators are 64-bit).
pub fn matmul_at_b_acc_f64<F: Real>(c: &mut [f64], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let a_ip = a_ip.as_f64();
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij.as_f64();
            }
        }
    }
}

/// Dot product of two equal-length slices, accumulated in F.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_acc(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Mat::<f64>::from_fn(3, 4, |r, c| (r * 7 + c) as f64 * 0.5 - 2.0);
        let b = Mat::<f64>::from_fn(3, 5, |r, c| (r + c * 3) as f64 * 0.25 + 1.0);
        // a^T * b via the f64 accumulator path.
        let mut c1 = vec![0.0f64; 4 * 5];
        matmul_at_b_acc_f64(&mut c1, a.as_slice(), b.as_slice(), 3, 4, 5);
        let mut c2 = vec![0.0f64; 4 * 5];
        for i in 0..4 {
            for j in 0..5 {
                for p in 0..3 {
                    c2[i * 5 + j] += a[(p, i)] * b[(p, j)];
                }
            }
        }
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // a[3x4] * b2^T where b2 is [5x4].
        let b2 = Mat::<f64>::from_fn(5, 4, |r, c| (r * 2 + c) as f64 * 0.1 - 0.3);
        let mut d1 = vec![0.0f64; 3 * 5];
        matmul_a_bt_acc(&mut d1, a.as_slice(), b2.as_slice(), 3, 4, 5);
        for i in 0..3 {
            for j in 0..5 {
                let expect = dot(a.row(i), b2.row(j));
                assert!((d1[i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }
}
