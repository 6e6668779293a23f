use nalgebra::DMatrix;

/// Matrix exponential by scaling and squaring with a truncated Taylor
/// series. The scaled matrix has 1-norm at most 1/2, where 20 terms reach
/// double precision.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Panel width of the blocked factorization and solves.
const BLOCK: usize = 64;

/// Lower Cholesky factor `A = L Lᵀ` of a symmetric positive definite
/// matrix, computed blockwise with the trailing updates done as matrix
/// products.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

impl CholeskyFactor {
    /// Only the lower triangle of `a` is read. Returns `None` when a pivot
    /// is not strictly positive.
    pub fn new(mut a: DMatrix<f64>) -> Option<Self> {
        assert!(a.is_square(), "Cholesky needs a square matrix");
        let n = a.nrows();
        let s = a.as_mut_slice();
        for k0 in (0..n).step_by(BLOCK) {
            let kb = BLOCK.min(n - k0);
            for j in k0..k0 + kb {
                for p in k0..j {
                    let ljp = s[j + p * n];
                    if ljp != 0.0 {
                        for i in j..n {
                            s[i + j * n] -= s[i + p * n] * ljp;
                        }
                    }
                }
                let d = s[j + j * n];
                if !(d > 0.0 && d.is_finite()) {
                    return None;
                }
                let d = d.sqrt();
                s[j + j * n] = d;
                for i in j + 1..n {
                    s[i + j * n] /= d;
                }
            }
            let t0 = k0 + kb;
            for c0 in (t0..n).step_by(BLOCK) {
                let cb = BLOCK.min(n - c0);
                let p = s.as_mut_ptr();
                // SAFETY: the panel (columns k0..t0) and the updated block
                // (columns c0..c0+cb, c0 >= t0) are disjoint parts of `s`,
                // and every index stays below n².
                unsafe {
                    matrixmultiply::dgemm(
                        n - c0,
                        kb,
                        cb,
                        -1.0,
                        p.add(c0 + k0 * n),
                        1,
                        n as isize,
                        p.add(c0 + k0 * n),
                        n as isize,
                        1,
                        1.0,
                        p.add(c0 + c0 * n),
                        1,
                        n as isize,
                    );
                }
            }
        }
        for j in 1..n {
            for i in 0..j {
                s[i + j * n] = 0.0;
            }
        }
        Some(CholeskyFactor { l: a })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Overwrites `b` with `L⁻¹ b`.
    pub fn solve_lower_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "right-hand side has the wrong row count");
        let m = b.ncols();
        let l = self.l.as_slice();
        let x = b.as_mut_slice();
        for k0 in (0..n).step_by(BLOCK) {
            let kb = BLOCK.min(n - k0);
            let t0 = k0 + kb;
            for c in 0..m {
                let col = &mut x[c * n..(c + 1) * n];
                for p in k0..t0 {
                    let v = col[p] / l[p + p * n];
                    col[p] = v;
                    if v != 0.0 {
                        for i in p + 1..t0 {
                            col[i] -= l[i + p * n] * v;
                        }
                    }
                }
            }
            if t0 < n && m > 0 {
                let xp = x.as_mut_ptr();
                // SAFETY: reads rows k0..t0 and writes rows t0..n of `x`,
                // which are disjoint; `l` is a separate allocation.
                unsafe {
                    matrixmultiply::dgemm(
                        n - t0,
                        kb,
                        m,
                        -1.0,
                        l.as_ptr().add(t0 + k0 * n),
                        1,
                        n as isize,
                        xp.add(k0),
                        1,
                        n as isize,
                        1.0,
                        xp.add(t0),
                        1,
                        n as isize,
                    );
                }
            }
        }
    }

    /// Overwrites `b` with `L⁻ᵀ b`.
    pub fn solve_upper_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "right-hand side has the wrong row count");
        let m = b.ncols();
        let l = self.l.as_slice();
        let x = b.as_mut_slice();
        let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
        for &k0 in starts.iter().rev() {
            let kb = BLOCK.min(n - k0);
            let t0 = k0 + kb;
            for c in 0..m {
                let col = &mut x[c * n..(c + 1) * n];
                for p in (k0..t0).rev() {
                    let v = col[p] / l[p + p * n];
                    col[p] = v;
                    if v != 0.0 {
                        for i in k0..p {
                            col[i] -= l[p + i * n] * v;
                        }
                    }
                }
            }
            if k0 > 0 && m > 0 {
                let xp = x.as_mut_ptr();
                // SAFETY: reads rows k0..t0 and writes rows 0..k0 of `x`.
                unsafe {
                    matrixmultiply::dgemm(
                        k0,
                        kb,
                        m,
                        -1.0,
                        l.as_ptr().add(k0),
                        n as isize,
                        1,
                        xp.add(k0),
                        1,
                        n as isize,
                        1.0,
                        xp,
                        1,
                        n as isize,
                    );
                }
            }
        }
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }
}

/// `a · bᵀ` through the blocked matrix product.
pub fn mul_transpose(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "inner dimensions differ");
    let (m, k, n) = (a.nrows(), a.ncols(), b.nrows());
    let mut c = DMatrix::zeros(m, n);
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: shapes and column-major strides match the three buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                1,
                m as isize,
            );
        }
    }
    c
}

/// `a · aᵀ` with only the blocks on and below the diagonal computed; the
/// strictly upper part of the result is unspecified.
pub fn lower_outer(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = (a.nrows(), a.ncols());
    let mut c = DMatrix::zeros(n, n);
    if n == 0 || k == 0 {
        return c;
    }
    for c0 in (0..n).step_by(BLOCK) {
        let cb = BLOCK.min(n - c0);
        // SAFETY: rows c0..n and columns c0..c0+cb of `c`, rows of `a`
        // below n; strides are column-major.
        unsafe {
            matrixmultiply::dgemm(
                n - c0,
                k,
                cb,
                1.0,
                a.as_ptr().add(c0),
                1,
                n as isize,
                a.as_ptr().add(c0),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr().add(c0 + c0 * n),
                1,
                n as isize,
            );
        }
    }
    c
}
