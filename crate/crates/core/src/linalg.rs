//! Matrix products on strided views.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major view of the first `rows * cols` entries.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(
            reach(rows, cols, rs, cs) <= data.len(),
            "view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {}",
            data.len()
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(
            reach(rows, cols, rs, cs) <= data.len(),
            "view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {}",
            data.len()
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c ← alpha · a b + beta · c`.
pub fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(c.rows, a.rows, "gemm output rows");
    assert_eq!(c.cols, b.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == T::zero() {
                    T::zero()
                } else {
                    *v * beta
                };
            }
        }
        return;
    }
    // SAFETY: the constructors checked that every reachable index is in
    // bounds, and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Plain product of two rank-2 tensors.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        T::zero(),
        MatMut::new(&mut out, m, n),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Output shape `[batch, m, n]` of `op(a) @ op(b)` for rank-3 operands.
pub(crate) fn bmm_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Option<(usize, usize, usize, usize)> {
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
        return None;
    }
    let (m, ka) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
    let (kb, n) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
    (ka == kb).then_some((a[0], m, ka, n))
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    if transposed {
        MatRef::new(data, cols, rows).t()
    } else {
        MatRef::new(data, rows, cols)
    }
}

/// Batched `op(a) @ op(b)` where `op` optionally transposes the last two axes.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = bmm_dims(a.shape(), b.shape(), ta, tb)
        .ok_or_else(|| Error::dim("bmm", a.shape(), b.shape()))?;
    let mut out = vec![T::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    parallel::for_each_chunk(&mut out, m * n, |i, c| {
        let av = &ad[i * m * k..(i + 1) * m * k];
        let bv = &bd[i * k * n..(i + 1) * k * n];
        gemm(
            T::one(),
            view(av, m, k, ta),
            view(bv, k, n, tb),
            T::zero(),
            MatMut::new(c, m, n),
        );
    });
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn identity_and_dot() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &v).unwrap().data(), &[3.0, 4.0]);
        let row = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        assert_eq!(matmul(&row, &v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_against_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let d = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&naive(&a, &b))
            .unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn bmm_transposes() {
        let mut rng = Rng::new(2);
        let a = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let c = bmm(&a, &b, false, true).unwrap();
        assert_eq!(c.shape(), &[2, 4, 5]);
        for batch in 0..2 {
            let ai = a.narrow(0, batch, 1).unwrap().reshape(&[4, 3]).unwrap();
            let bi = b.narrow(0, batch, 1).unwrap().reshape(&[5, 3]).unwrap();
            let bt = bi.permute(&[1, 0]).unwrap();
            let ci = c.narrow(0, batch, 1).unwrap().reshape(&[4, 5]).unwrap();
            assert!(ci.max_abs_diff(&naive(&ai, &bt)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_inner_extent_gives_zeros() {
        let a = Tensor::<f64>::zeros(&[2, 0]);
        let b = Tensor::<f64>::zeros(&[0, 3]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0; 6]);
    }
}
