//! Dense row-major tensors of f64.
//!
//! Tensors are immutable values: every operation returns a fresh tensor,
//! which makes them safe to share read-only across threads. The first
//! axis is the batch axis by convention wherever per-sample semantics
//! matter (norms, slicing, shifting).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "zip over {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sign(&self) -> Tensor {
        // sign(0) = 0 so exactly-zero gradients inject no perturbation.
        self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign over {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    // ── Batch helpers (first axis = batch) ───────────────────────────

    pub fn batch_len(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    /// Number of elements in one sample.
    pub fn sample_numel(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        if self.shape.is_empty() {
            &[]
        } else {
            &self.shape[1..]
        }
    }

    pub fn sample(&self, b: usize) -> Tensor {
        let n = self.sample_numel();
        Tensor { shape: self.sample_shape().to_vec(), data: self.data[b * n..(b + 1) * n].to_vec() }
    }

    pub fn sample_data(&self, b: usize) -> &[f64] {
        let n = self.sample_numel();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn set_sample(&mut self, b: usize, sample: &Tensor) {
        let n = self.sample_numel();
        debug_assert_eq!(sample.numel(), n);
        self.data[b * n..(b + 1) * n].copy_from_slice(&sample.data);
    }

    /// Stack equal-shaped samples into a batch.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * samples.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::ShapeMismatch("stack over unequal sample shapes".into()));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(shape, data)
    }

    /// Per-sample L1 norms, one per batch row.
    pub fn l1_per_sample(&self) -> Vec<f64> {
        let n = self.sample_numel();
        self.data.chunks(n).map(|c| c.iter().map(|v| v.abs()).sum()).collect()
    }

    /// Per-sample L-infinity distance to another tensor of the same shape.
    pub fn linf_per_sample(&self, other: &Tensor) -> Vec<f64> {
        debug_assert_eq!(self.shape, other.shape);
        let n = self.sample_numel();
        self.data
            .chunks(n)
            .zip(other.data.chunks(n))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .collect()
    }

    /// Scale each sample by its own coefficient.
    pub fn scale_per_sample(&self, coeffs: &[f64]) -> Tensor {
        let n = self.sample_numel();
        debug_assert_eq!(coeffs.len(), self.batch_len());
        let mut data = self.data.clone();
        for (b, chunk) in data.chunks_mut(n).enumerate() {
            for v in chunk.iter_mut() {
                *v *= coeffs[b];
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    // ── Circular shift ───────────────────────────────────────────────

    /// Circularly shift the trailing axes by the given offsets.
    ///
    /// `offsets[k]` applies to axis `rank - offsets.len() + k`; the element
    /// at index `i` moves to `(i + offset) mod extent`. Leading axes
    /// (batch, channel) are untouched. Offsets may be any integers; they
    /// are reduced modulo the axis extent.
    pub fn circular_shift(&self, offsets: &[i64]) -> Tensor {
        if offsets.is_empty() || offsets.iter().all(|&o| o == 0) {
            return self.clone();
        }
        let rank = self.shape.len();
        assert!(offsets.len() <= rank, "more offsets than axes");
        let lead = rank - offsets.len();
        let mut norm = vec![0usize; rank];
        for (k, &o) in offsets.iter().enumerate() {
            let extent = self.shape[lead + k] as i64;
            if extent > 0 {
                norm[lead + k] = o.rem_euclid(extent) as usize;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        let strides = row_major_strides(&self.shape);
        let mut idx = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            // destination index = source index + offset (mod extent) per axis
            let mut dst = 0;
            for d in 0..rank {
                let shifted = (idx[d] + norm[d]) % self.shape[d].max(1);
                dst += shifted * strides[d];
            }
            out[dst] = v;
            // increment the multi-index
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
            let _ = flat;
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Discretized isotropic Gaussian, normalized to sum exactly to 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd and >= 1, got {size}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Tensor::new(vec![size, size], data)
}

/// Depthwise 2-D correlation with edge-replicate padding; output shape
/// equals input shape. Accepts (H,W), (C,H,W) or (B,C,H,W) inputs and an
/// odd square kernel no larger than the spatial extent.
pub fn conv_same(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv_same kernel must be odd square, got {ks:?}")));
    }
    let k = ks[0];
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::ShapeMismatch(format!("conv_same needs >=2 spatial axes, got {:?}", x.shape())));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    if k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "kernel {k}x{k} larger than spatial extent {h}x{w}"
        )));
    }
    let channels = x.numel() / (h * w);
    let half = (k / 2) as i64;
    let kd = kernel.data();
    let mut out = vec![0.0; x.numel()];
    for ch in 0..channels {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut acc = 0.0;
                for di in -half..=half {
                    // replicate padding clamps the source index to the edge
                    let si = (i + di).clamp(0, h as i64 - 1) as usize;
                    for dj in -half..=half {
                        let sj = (j + dj).clamp(0, w as i64 - 1) as usize;
                        let kv = kd[((di + half) * k as i64 + (dj + half)) as usize];
                        acc += kv * plane[si * w + sj];
                    }
                }
                oplane[(i as usize) * w + j as usize] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Dense matrix product C = A(m,k) * B(k,n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C = A^T(m,k with A stored k-major? no) — product of A(k,m)ᵀ · B(k,n).
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
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
            n as isize,
            1,
        );
    }
    c
}

/// Product of A(m,k) · B(n,k)ᵀ.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn empty_shape_is_scalar() {
        let t = Tensor::scalar(4.25);
        assert_eq!(t.numel(), 1);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 4.25);
    }

    #[test]
    fn circular_shift_1d() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.circular_shift(&[1]).data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.circular_shift(&[0]).data(), t.data());
        assert_eq!(t.circular_shift(&[-1]).data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(t.circular_shift(&[5]).data(), t.circular_shift(&[1]).data());
    }

    #[test]
    fn circular_shift_round_trip() {
        let mut rng = crate::rng::stream(3, &[0]);
        use rand::Rng;
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.gen::<f64>()).collect();
        let t = Tensor::new(vec![2, 3, 4, 5], data).unwrap();
        let d = [3i64, -7];
        let back = t.circular_shift(&d).circular_shift(&[-d[0], -d[1]]);
        assert_eq!(back, t);
    }

    #[test]
    fn circular_shift_leaves_leading_axes() {
        // (B=2, W=2): shifting last axis must not mix batch rows
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.circular_shift(&[1]);
        assert_eq!(s.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn circular_shift_adjoint_identity() {
        // <shift(x, d), v> == <x, shift(v, -d)> exactly. Both sides produce
        // the same multiset of elementwise products, so summing in a
        // canonical order makes the equality bitwise.
        use rand::Rng;
        let canonical_dot = |a: &Tensor, b: &Tensor| -> f64 {
            let mut prods: Vec<f64> =
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            prods.sort_by(f64::total_cmp);
            prods.iter().sum()
        };
        let mut rng = crate::rng::stream(11, &[1]);
        for trial in 0..20 {
            let shape = vec![2, 3, 5, 4];
            let n: usize = shape.iter().product();
            let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
                .unwrap();
            let v = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
                .unwrap();
            let d = [rng.gen_range(-10i64..10), rng.gen_range(-10i64..10)];
            let lhs = canonical_dot(&x.circular_shift(&d), &v);
            let rhs = canonical_dot(&x, &v.circular_shift(&[-d[0], -d[1]]));
            assert_eq!(lhs, rhs, "trial {trial}");
        }
    }

    #[test]
    fn gaussian_kernel_normalized() {
        for (size, sigma) in [(7usize, 3.0), (1, 0.5), (5, 1.0), (9, 2.5)] {
            let k = gaussian_kernel(size, sigma).unwrap();
            assert_eq!(k.shape(), &[size, size]);
            assert!((k.sum() - 1.0).abs() < 1e-12, "size {size} sigma {sigma}");
        }
        let k1 = gaussian_kernel(1, 1.0).unwrap();
        assert_eq!(k1.data(), &[1.0]);
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
    }

    #[test]
    fn conv_same_uniform_field_invariant() {
        let x = Tensor::filled(&[1, 2, 6, 5], 0.75);
        let k = gaussian_kernel(3, 1.0).unwrap();
        let y = conv_same(&x, &k).unwrap();
        for v in y.data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_identity_kernel() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, &[2]);
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let k = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert_eq!(conv_same(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_same_stamps_interior_impulse() {
        let mut x = Tensor::zeros(&[5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let k = gaussian_kernel(3, 0.8).unwrap();
        let y = conv_same(&x, &k).unwrap();
        for di in 0..3 {
            for dj in 0..3 {
                // correlation stamps the kernel mirrored around the impulse
                let expect = k.data()[(2 - di) * 3 + (2 - dj)];
                assert!((y.data()[(1 + di) * 5 + (1 + dj)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_same_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let k = gaussian_kernel(5, 1.0).unwrap();
        assert!(conv_same(&x, &k).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        use rand::Rng;
        let mut rng = crate::rng::stream(9, &[4]);
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = matmul(&a, &b, m, k, n);
        // a_t holds A^T in row-major (k, m)
        let mut a_t = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                a_t[j * m + i] = a[i * k + j];
            }
        }
        let c2 = matmul_tn(&a_t, &b, k, m, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // b_t holds B^T in row-major (n, k)
        let mut b_t = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                b_t[j * k + i] = b[i * n + j];
            }
        }
        let c3 = matmul_nt(&a, &b_t, m, k, n);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn per_sample_helpers() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        assert_eq!(t.l1_per_sample(), vec![6.0, 15.0]);
        let u = Tensor::zeros(&[2, 3]);
        assert_eq!(t.linf_per_sample(&u), vec![3.0, 6.0]);
        let s = t.scale_per_sample(&[2.0, 0.5]);
        assert_eq!(s.data(), &[2.0, -4.0, 6.0, -2.0, 2.5, -3.0]);
        assert_eq!(t.sample(1).data(), &[-4.0, 5.0, -6.0]);
    }
}
