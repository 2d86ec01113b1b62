/// Strided view of a row-major-ish matrix: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn with_row_stride(rows: usize, cols: usize, rs: usize) -> Self {
        MatView { rows, cols, rs, cs: 1 }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a·b + beta * c`.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    assert!(av.extent() <= a.len());
    assert!(bv.extent() <= b.len());
    assert!(cv.extent() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: the extents of all three strided views were checked against
    // their backing slices above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            &a,
            MatView::row_major(2, 3),
            &b,
            MatView::row_major(3, 4),
            0.0,
            &mut c,
            MatView::row_major(2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // (bᵀ aᵀ) = (a b)ᵀ
        let mut ct = vec![0.0; 8];
        gemm(
            1.0,
            &b,
            MatView::row_major(3, 4).t(),
            &a,
            MatView::row_major(2, 3).t(),
            0.0,
            &mut ct,
            MatView::row_major(4, 2),
        );
        for i in 0..2 {
            for j in 0..4 {
                assert!((c[i * 4 + j] - ct[j * 2 + i]).abs() < 1e-14);
            }
        }
    }
}
