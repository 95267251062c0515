//! Dense row-major `f64` tensors and their little-endian `f32` blob encoding.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite entry {} at flat index {i}",
            data[i]
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            ));
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// Builds without the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(shape_err!("expected a 2-D matrix, got shape {s:?}")),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims()?;
        let mut out = vec![0.0; m * n];
        linalg::transpose_into(m, n, &self.data, &mut out);
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k) = self.matrix_dims()?;
        let (k2, n) = rhs.matrix_dims()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                rhs.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm(m, k, n, &self.data, &rhs.data, &mut out);
        check_finite(&out)?;
        Ok(Self::from_parts(vec![m, n], out))
    }

    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(shape_err!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape,
                rhs.shape
            ));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data)?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Keeps only `indices` (in the given order) along `axis`.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(shape_err!("index {bad} out of range for axis extent {extent}"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Blob encoding: `u32` rank, `u32` extents, then row-major little-endian `f32`.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<()> {
        let rank = u32::try_from(self.rank()).map_err(|_| shape_err!("rank too large"))?;
        w.write_all(&rank.to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| shape_err!("extent {d} exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 16 {
            return Err(Error::Data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identity_padded_product() {
        // [[1,2,3],[4,5,6]] x [[1,0],[0,1],[0,0]]
        let a = Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        let b = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.], vec![0., 0.]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[2]).transpose(), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_equals_naive_exactly() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 7, 5), (9, 4, 13), (33, 65, 17), (130, 20, 600)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert_eq!(a.matmul(&b).unwrap().data(), naive_matmul(&a, &b).as_slice());
        }
    }

    #[test]
    fn select_along_axis() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.select(1, &[0, 2]).unwrap().data(), &[1., 3., 4., 6.]);
        assert_eq!(t.select(0, &[1]).unwrap().data(), &[4., 5., 6.]);
        assert!(t.select(1, &[3]).is_err());
    }

    #[test]
    fn blob_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        let mut expect = Vec::new();
        for w in [2u32, 1, 2] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(Tensor::read_blob(&mut buf.as_slice()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn transpose_is_involution(m in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
            let a = random(&[m, n], &mut Rng::new(seed));
            prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
        }

        #[test]
        fn blob_round_trip_is_stable(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let a = random(&[m, n], &mut Rng::new(seed));
            let mut once = Vec::new();
            a.write_blob(&mut once).unwrap();
            let back = Tensor::read_blob(&mut once.as_slice()).unwrap();
            let mut twice = Vec::new();
            back.write_blob(&mut twice).unwrap();
            prop_assert_eq!(once, twice);
            for (x, y) in a.data().iter().zip(back.data()) {
                prop_assert_eq!(*x as f32 as f64, *y);
            }
        }
    }
}
