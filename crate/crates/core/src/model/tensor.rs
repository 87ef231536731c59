use num_traits::Float;

/// Floating-point type the dense head can run in: `f32` for training and
/// inference, `f64` for finite-difference checks.
pub trait Real: Float + Send + Sync + std::iter::Sum + std::fmt::Debug + 'static {
    /// `c = a * b + beta * c` with row-major storage. `a` is logically
    /// `m x k` (stored transposed when `a_t`), `b` is logically `k x n`
    /// (stored transposed when `b_t`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);

    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_dims(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k && b >= k * n && c >= m * n, "gemm operand too small");
}

impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
        check_dims(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_t);
        let (rsb, csb) = strides(k, n, b_t);
        // SAFETY: operand lengths were checked against the logical shapes and
        // the strides address only elements inside them.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f32(v: f32) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
        check_dims(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_t);
        let (rsb, csb) = strides(k, n, b_t);
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f32(v: f32) -> Self {
        v as f64
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Single-image activation tensor, row-major `h x w x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(&self) -> ndarray::Array3<f32> {
        ndarray::Array3::from_shape_vec((self.h, self.w, self.c), self.data.clone()).expect("consistent shape")
    }
}
