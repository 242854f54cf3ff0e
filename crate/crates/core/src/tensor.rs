//! Dense three-mode complex tensors.
//!
//! Storage is mode-1 fastest: entry `(i1, i2, i3)` lives at
//! `i1 + I1 * (i2 + I2 * i3)`. The mode-`n` unfolding places the remaining
//! modes along columns with the lower-numbered mode varying fastest, so the
//! column index is `j = Σ_{k≠n} i_k J_k` with `J_k = Π_{m<k, m≠n} I_m`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor3 {
    dims: [usize; 3],
    data: Vec<C64>,
}

impl ComplexTensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![C64::new(0.0, 0.0); dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<C64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i3 in 0..dims[2] {
            for i2 in 0..dims[1] {
                for i1 in 0..dims[0] {
                    data.push(f(i1, i2, i3));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i1: usize, i2: usize, i3: usize) -> usize {
        i1 + self.dims[0] * (i2 + self.dims[1] * i3)
    }

    #[inline]
    pub fn get(&self, i1: usize, i2: usize, i3: usize) -> C64 {
        self.data[self.offset(i1, i2, i3)]
    }

    #[inline]
    pub fn set(&mut self, i1: usize, i2: usize, i3: usize, v: C64) {
        let o = self.offset(i1, i2, i3);
        self.data[o] = v;
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    /// Column-major vectorization (the storage order).
    pub fn vectorize(&self) -> CVec {
        CVec::from_column_slice(&self.data)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, c: C64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { dims: self.dims, data })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// Frontal slice `[:, :, k]` as an `I1 × I2` matrix.
    pub fn frontal_slice(&self, k: usize) -> CMat {
        let [i1, i2, _] = self.dims;
        CMat::from_column_slice(i1, i2, &self.data[k * i1 * i2..(k + 1) * i1 * i2])
    }

    pub fn mode_unfold(&self, n: usize) -> Result<CMat> {
        let [a, b, c] = self.dims;
        match n {
            1 => Ok(CMat::from_column_slice(a, b * c, &self.data)),
            2 => Ok(CMat::from_fn(b, a * c, |i2, j| self.get(j % a, i2, j / a))),
            3 => Ok(CMat::from_fn(c, a * b, |i3, j| self.get(j % a, j / a, i3))),
            _ => Err(Error::InvalidMode(n)),
        }
    }

    /// Inverse of [`mode_unfold`](Self::mode_unfold).
    pub fn fold(m: &CMat, n: usize, dims: [usize; 3]) -> Result<Self> {
        let [a, b, c] = dims;
        let (rows, cols) = match n {
            1 => (a, b * c),
            2 => (b, a * c),
            3 => (c, a * b),
            _ => return Err(Error::InvalidMode(n)),
        };
        if m.nrows() != rows || m.ncols() != cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix cannot fold to {:?} along mode {}",
                m.nrows(),
                m.ncols(),
                dims,
                n
            )));
        }
        Ok(match n {
            1 => Self { dims, data: m.as_slice().to_vec() },
            2 => Self::from_fn(dims, |i1, i2, i3| m[(i2, i1 + a * i3)]),
            _ => Self::from_fn(dims, |i1, i2, i3| m[(i3, i1 + a * i2)]),
        })
    }

    pub fn mode_product(&self, d: &CMat, n: usize) -> Result<Self> {
        if !(1..=3).contains(&n) {
            return Err(Error::InvalidMode(n));
        }
        if d.ncols() != self.dims[n - 1] {
            return Err(Error::DimensionMismatch(format!(
                "factor has {} columns, mode {} has size {}",
                d.ncols(),
                n,
                self.dims[n - 1]
            )));
        }
        let mut dims = self.dims;
        dims[n - 1] = d.nrows();
        let y = d * self.mode_unfold(n)?;
        Self::fold(&y, n, dims)
    }
}

/// `core ×₁ d1 ×₂ d2 ×₃ d3`.
pub fn tucker_reconstruct(core: &ComplexTensor3, d1: &CMat, d2: &CMat, d3: &CMat) -> Result<ComplexTensor3> {
    core.mode_product(d1, 1)?.mode_product(d2, 2)?.mode_product(d3, 3)
}

/// `(d3 ⊗ d2 ⊗ d1) · core_vec`, evaluated through the folded core.
pub fn vectorize_tucker(core_vec: &CVec, d1: &CMat, d2: &CMat, d3: &CMat) -> Result<CVec> {
    let dims = [d1.ncols(), d2.ncols(), d3.ncols()];
    if core_vec.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::DimensionMismatch(format!(
            "core vector of length {} for factor columns {:?}",
            core_vec.len(),
            dims
        )));
    }
    let core = ComplexTensor3::from_vec(dims, core_vec.as_slice().to_vec())?;
    Ok(tucker_reconstruct(&core, d1, d2, d3)?.vectorize())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    CMat::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

pub fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let bl = b.len();
    CVec::from_fn(a.len() * bl, |i, _| a[i / bl] * b[i % bl])
}

/// Column-wise Kronecker product.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let br = b.nrows();
    Ok(CMat::from_fn(a.nrows() * br, a.ncols(), |i, j| a[(i / br, j)] * b[(i % br, j)]))
}

pub fn outer3(u: &CVec, v: &CVec, w: &CVec) -> ComplexTensor3 {
    ComplexTensor3::from_fn([u.len(), v.len(), w.len()], |i, j, k| u[i] * v[j] * w[k])
}

pub fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}
