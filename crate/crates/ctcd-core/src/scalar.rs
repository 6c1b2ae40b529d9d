use serde::{Deserialize, Serialize};

/// Element precision of a run. A graph and everything attached to it
/// (parameters, optimizer state, checkpoints) lives in exactly one
/// precision; the two are never mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Single),
            1 => Some(Precision::Double),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

/// Scalar element type the whole engine is generic over. `f64` is used by
/// the oracle and acceptance tests, `f32` by the desk-scale training runs.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    /// Size of one element in checkpoint / cache files.
    const BYTE_WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C := A @ B with arbitrary row/column strides on A and B; C is
    /// row-major [m, n]. Backing kernel for all matmul variants.
    ///
    /// # Safety
    /// Pointers must cover the strided m*k / k*n index ranges and `c` must
    /// hold m*n elements.
    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        c: *mut Self,
    );
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTE_WIDTH: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        c: *mut f32,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTE_WIDTH: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        c: *mut f64,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
    }
}
