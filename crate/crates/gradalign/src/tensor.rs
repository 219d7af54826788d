//! Dense row-major f64 tensors and the matrix-multiply kernel.
//!
//! Matrix products go through the system BLAS (`dgemm_`) when it can be
//! loaded, with a naive fallback kernel that doubles as the test oracle.

use std::ffi::c_void;
use std::os::raw::{c_char, c_int};
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor; rank-1 is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place self += alpha * other.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in axpy");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Column sums of a rank-2 tensor, accumulated in ascending row order.
    pub fn col_sum(&self) -> Tensor {
        let (_, d) = self.dims2();
        let mut out = Tensor::zeros(&[d]);
        if d == 0 {
            return out;
        }
        for row in self.data.chunks_exact(d) {
            for (o, &x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn col_mean(&self) -> Tensor {
        let (n, _) = self.dims2();
        self.col_sum().scale(1.0 / n as f64)
    }

    /// Elementwise product with a row vector broadcast over rows.
    pub fn mul_row(&self, r: &Tensor) -> Tensor {
        let (_, d) = self.dims2();
        assert_eq!(r.len(), d, "row-broadcast length mismatch");
        let mut out = self.clone();
        if d == 0 {
            return out;
        }
        for row in out.data.chunks_exact_mut(d) {
            for (x, &rv) in row.iter_mut().zip(&r.data) {
                *x *= rv;
            }
        }
        out
    }

    /// Difference with a row vector broadcast over rows.
    pub fn sub_row(&self, r: &Tensor) -> Tensor {
        let (_, d) = self.dims2();
        assert_eq!(r.len(), d, "row-broadcast length mismatch");
        let mut out = self.clone();
        if d == 0 {
            return out;
        }
        for row in out.data.chunks_exact_mut(d) {
            for (x, &rv) in row.iter_mut().zip(&r.data) {
                *x -= rv;
            }
        }
        out
    }

    /// Sum with a row vector broadcast over rows.
    pub fn add_row(&self, r: &Tensor) -> Tensor {
        let (_, d) = self.dims2();
        assert_eq!(r.len(), d, "row-broadcast length mismatch");
        let mut out = self.clone();
        if d == 0 {
            return out;
        }
        for row in out.data.chunks_exact_mut(d) {
            for (x, &rv) in row.iter_mut().zip(&r.data) {
                *x += rv;
            }
        }
        out
    }

    /// op(self) @ op(other) where op transposes when the flag is set.
    pub fn matmul(&self, ta: bool, other: &Tensor, tb: bool) -> Tensor {
        let (ra, ca) = self.dims2();
        let (rb, cb) = other.dims2();
        let m = if ta { ca } else { ra };
        let n = if tb { rb } else { cb };
        let mut out = Tensor::zeros(&[m, n]);
        self.matmul_into(ta, other, tb, &mut out, 0.0);
        out
    }

    /// out += op(self) @ op(other), accumulating into an existing buffer.
    pub fn matmul_acc(&self, ta: bool, other: &Tensor, tb: bool, out: &mut Tensor) {
        self.matmul_into(ta, other, tb, out, 1.0);
    }

    fn matmul_into(&self, ta: bool, other: &Tensor, tb: bool, out: &mut Tensor, beta: f64) {
        let (ra, ca) = self.dims2();
        let (rb, cb) = other.dims2();
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(ka, kb, "matmul inner dimensions {} vs {}", ka, kb);
        assert_eq!(out.dims2(), (m, n), "matmul output shape mismatch");
        if m == 0 || n == 0 || ka == 0 {
            return;
        }
        match blas_dgemm() {
            Some(dgemm) => {
                // Row-major product via the column-major identity Cᵀ = op(B)ᵀ·op(A)ᵀ:
                // the stored row-major buffers are the transposed column-major views.
                let trans_a = if ta { b'T' } else { b'N' } as c_char;
                let trans_b = if tb { b'T' } else { b'N' } as c_char;
                let (bm, bn, bk) = (n as c_int, m as c_int, ka as c_int);
                let (lda, ldb, ldc) = (cb as c_int, ca as c_int, n as c_int);
                let alpha = 1.0f64;
                unsafe {
                    dgemm(
                        &trans_b,
                        &trans_a,
                        &bm,
                        &bn,
                        &bk,
                        &alpha,
                        other.data.as_ptr(),
                        &lda,
                        self.data.as_ptr(),
                        &ldb,
                        &beta,
                        out.data.as_mut_ptr(),
                        &ldc,
                    );
                }
            }
            None => naive_matmul(self, ta, other, tb, out, beta),
        }
    }
}

fn naive_matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor, beta: f64) {
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let n = if tb { rb } else { cb };
    let at = |i: usize, l: usize| {
        if ta {
            a.data[l * ca + i]
        } else {
            a.data[i * ca + l]
        }
    };
    let bt = |l: usize, j: usize| {
        if tb {
            b.data[j * cb + l]
        } else {
            b.data[l * cb + j]
        }
    };
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += at(i, l) * bt(l, j);
            }
            out.data[i * n + j] = beta * out.data[i * n + j] + acc;
        }
    }
}

type DgemmFn = unsafe extern "C" fn(
    transa: *const c_char,
    transb: *const c_char,
    m: *const c_int,
    n: *const c_int,
    k: *const c_int,
    alpha: *const f64,
    a: *const f64,
    lda: *const c_int,
    b: *const f64,
    ldb: *const c_int,
    beta: *const f64,
    c: *mut f64,
    ldc: *const c_int,
);

static DGEMM: OnceLock<Option<DgemmFn>> = OnceLock::new();

fn blas_dgemm() -> Option<DgemmFn> {
    *DGEMM.get_or_init(load_blas)
}

/// Loads the system OpenBLAS after pinning its kernel selection and thread
/// count. DYNAMIC_ARCH builds read OPENBLAS_CORETYPE at load time and can
/// pick a generic kernel on virtualized CPUs, so the library is dlopen'd
/// after the environment is set rather than linked at build time.
fn load_blas() -> Option<DgemmFn> {
    // Large activation buffers are allocated and freed every operation;
    // keeping them on the heap instead of per-allocation mmaps avoids
    // constant page-fault churn.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
    if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
            } else if is_x86_feature_detected!("avx2") {
                std::env::set_var("OPENBLAS_CORETYPE", "HASWELL");
            }
        }
    }
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        let threads = std::env::var("GRADALIGN_THREADS").unwrap_or_else(|_| "1".into());
        std::env::set_var("OPENBLAS_NUM_THREADS", threads);
    }
    for name in [c"libopenblas.so.0", c"libopenblas.so"] {
        let handle = unsafe { libc::dlopen(name.as_ptr(), libc::RTLD_NOW | libc::RTLD_GLOBAL) };
        if handle.is_null() {
            continue;
        }
        let sym = unsafe { libc::dlsym(handle, c"dgemm_".as_ptr()) };
        if !sym.is_null() {
            return Some(unsafe { std::mem::transmute::<*mut c_void, DgemmFn>(sym) });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matmul_matches_naive_for_all_transpose_flags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (7, 5, 9), (16, 16, 16)] {
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let a = random_tensor(&mut rng, &if ta { [k, m] } else { [m, k] });
                let b = random_tensor(&mut rng, &if tb { [n, k] } else { [k, n] });
                let fast = a.matmul(ta, &b, tb);
                let mut slow = Tensor::zeros(&[m, n]);
                naive_matmul(&a, ta, &b, tb, &mut slow, 0.0);
                for (x, y) in fast.data.iter().zip(&slow.data) {
                    assert!((x - y).abs() < 1e-12, "mismatch ta={ta} tb={tb}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(false, &eye, false).data, a.data);
    }

    #[test]
    fn matmul_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[31, 17]);
        let b = random_tensor(&mut rng, &[17, 23]);
        let c1 = a.matmul(false, &b, false);
        let c2 = a.matmul(false, &b, false);
        assert_eq!(c1.data, c2.data);
    }

    #[test]
    fn dims2_treats_vectors_as_rows() {
        let v = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        assert_eq!(v.dims2(), (1, 3));
    }
}
