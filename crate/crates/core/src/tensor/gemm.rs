use super::Scalar;

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatView {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `[rows, cols]` matrix, read as `[cols, rows]`.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatView {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * self.rs as usize + (cols as isize - 1) as usize * self.cs as usize
    }
}

/// `c = alpha * a[m×k] * b[k×n] + beta * c`, with `c` addressed by
/// `(rsc, csc)` strides. Bounds are checked before dispatching.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0 && rsc >= 0 && csc >= 0);
    if k > 0 {
        assert!(a.max_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
        assert!(b.max_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    }
    let c_max = (m - 1) * rsc as usize + (n - 1) * csc as usize;
    assert!(c_max < c.len(), "gemm: output view out of bounds");
    // SAFETY: all reachable offsets were bounds-checked above, strides are
    // non-negative, and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
