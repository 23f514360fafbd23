//! Dense row-major tensors and the `DKT1` blob encoding.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage precision for tensors. `f32` drives training, `f64` exists for
/// gradient and identity checks.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    /// Blob dtype code: 0 = f32, 1 = f64.
    const DTYPE_CODE: u8;
    const SIZE: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a · b + beta · c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $code:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE_CODE: u8 = $code;
            const SIZE: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v = *v * beta;
                    }
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                // SAFETY: bounds of a, b and c were checked above for the
                // given strides; all strides are non-negative.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_element!(f32, 0, matrixmultiply::sgemm);
impl_element!(f64, 1, matrixmultiply::dgemm);

/// A dense tensor with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

pub const BLOB_MAGIC: &[u8; 4] = b"DKT1";

impl<E: Element> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) && !data.is_empty() {
            return Err(Error::shape(format!("dims {dims:?} hold no elements")));
        }
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn full(dims: &[usize], value: E) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            dims.to_vec(),
            values.iter().map(|&v| E::from_f64(v)).collect(),
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent, i.e. the batch size for `[B, ...]` tensors.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    /// Elements per leading-extent slice.
    pub fn row_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[E] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Stacks rows with identical trailing dims into a `[n, ...]` tensor.
    pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [E]>, row_dims: &[usize]) -> Self {
        let width: usize = row_dims.iter().product();
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            debug_assert_eq!(r.len(), width);
            data.extend_from_slice(r);
            n += 1;
        }
        let mut dims = vec![n];
        dims.extend_from_slice(row_dims);
        Self { dims, data }
    }

    /// Selects rows by index into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let rows = idx.iter().map(|&i| self.row(i));
        Self::stack_rows(rows, &self.dims[1..])
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Encodes as `DKT1 | dtype | rank | dims (u32 LE) | payload (LE)`.
    pub fn to_blob(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::shape("rank exceeds 255"));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + E::SIZE * self.data.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.push(E::DTYPE_CODE);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::shape("extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    /// Decodes a blob; `origin` only labels errors.
    pub fn from_blob(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 6 || &bytes[..4] != BLOB_MAGIC {
            return Err(fail("bad magic bytes, expected DKT1"));
        }
        if bytes[4] != E::DTYPE_CODE {
            return Err(fail(&format!(
                "dtype code {} does not match requested code {}",
                bytes[4],
                E::DTYPE_CODE
            )));
        }
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(fail("truncated dims"));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * E::SIZE {
            return Err(fail(&format!(
                "payload holds {} bytes, dims {dims:?} need {}",
                payload.len(),
                n * E::SIZE
            )));
        }
        let data = payload.chunks_exact(E::SIZE).map(E::read_le).collect();
        Ok(Self { dims, data })
    }

    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_blob()?)?;
        Ok(())
    }

    pub fn read_blob(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_blob(&bytes, path)
    }
}
