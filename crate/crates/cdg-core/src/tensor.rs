//! Dense rank-4 tensor with the channel-axis operations the rest of the
//! crate builds on.
//!
//! Layout is row-major with the output-channel axis outermost: element
//! `(o, i, h, w)` of a tensor with dimensions `(O, I, H, W)` lives at linear
//! index `((o*I + i)*H + h)*W + w`. Slices along the output axis are
//! therefore contiguous runs of `I*H*W` values, which is what the per-fiber
//! solvers and the `CDG1` serialization format assume.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the tensor file format.
pub const CDG_MAGIC: [u8; 4] = *b"CDG1";

/// Dense rank-4 tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    /// Builds a tensor from dimensions and row-major data.
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        validate_dims(dims)?;
        let n = dims.iter().product();
        Ok(Tensor4 {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every index, in layout order.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        validate_dims(dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..dims[0] {
            for i in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(o, i, h, w));
                    }
                }
            }
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of output channels (size of axis 0).
    pub fn outer(&self) -> usize {
        self.dims[0]
    }

    /// Elements per output-channel slice (`I*H*W`).
    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
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

    #[inline]
    pub fn at(&self, o: usize, i: usize, h: usize, w: usize) -> f64 {
        let [_, di, dh, dw] = self.dims;
        self.data[((o * di + i) * dh + h) * dw + w]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, h: usize, w: usize) -> &mut f64 {
        let [_, di, dh, dw] = self.dims;
        &mut self.data[((o * di + i) * dh + h) * dw + w]
    }

    /// Contiguous output-channel slices.
    pub fn outer_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.slice_len().max(1))
    }

    /// Mean over the output-channel axis, broadcast back to the full shape.
    ///
    /// Idempotent and linear; the result is constant along axis 0.
    pub fn channel_mean(&self) -> Tensor4 {
        let s = self.slice_len();
        let o = self.outer();
        let mut mean = vec![0.0; s];
        for slice in self.data.chunks_exact(s) {
            for (m, &v) in mean.iter_mut().zip(slice) {
                *m += v;
            }
        }
        let inv = 1.0 / o as f64;
        for m in &mut mean {
            *m *= inv;
        }
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..o {
            data.extend_from_slice(&mean);
        }
        Tensor4 {
            dims: self.dims,
            data,
        }
    }

    /// Permutes the axes: `out.dims[k] = self.dims[perm[k]]` and
    /// `out[j0,j1,j2,j3] = self[i0,i1,i2,i3]` with `i[perm[k]] = j[k]`.
    pub fn transpose_axes(&self, perm: [usize; 4]) -> Result<Tensor4> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::invalid(format!(
                    "{:?} is not a permutation of (0,1,2,3)",
                    perm
                )));
            }
            seen[p] = true;
        }
        let nd = [
            self.dims[perm[0]],
            self.dims[perm[1]],
            self.dims[perm[2]],
            self.dims[perm[3]],
        ];
        // inv[p[k]] = k, so source index i[a] = j[inv[a]].
        let mut inv = [0usize; 4];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let mut out = Vec::with_capacity(self.data.len());
        let mut j = [0usize; 4];
        for j0 in 0..nd[0] {
            j[0] = j0;
            for j1 in 0..nd[1] {
                j[1] = j1;
                for j2 in 0..nd[2] {
                    j[2] = j2;
                    for j3 in 0..nd[3] {
                        j[3] = j3;
                        out.push(self.at(j[inv[0]], j[inv[1]], j[inv[2]], j[inv[3]]));
                    }
                }
            }
        }
        Ok(Tensor4 { dims: nd, data: out })
    }

    /// Row-major flattening into shape `(N, 1, 1, 1)`.
    pub fn rasterize(&self) -> Tensor4 {
        Tensor4 {
            dims: [self.data.len(), 1, 1, 1],
            data: self.data.clone(),
        }
    }

    /// Inverse of [`rasterize`](Self::rasterize) for the given target shape.
    pub fn derasterize(&self, dims: [usize; 4]) -> Result<Tensor4> {
        validate_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {} elements into dims {:?}",
                self.data.len(),
                dims
            )));
        }
        Ok(Tensor4 {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor4, scale: f64) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor4 {
            dims: self.dims,
            data,
        })
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes in the `CDG1` format: magic, u32 LE ndim (4), four u32 LE
    /// dims, then IEEE-754 binary64 LE values in layout order.
    pub fn write_cdg<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CDG_MAGIC)?;
        w.write_all(&4u32.to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("dimension {} exceeds u32", d)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cdg<R: Read>(mut r: R) -> Result<Tensor4> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Parse("truncated header: missing magic".into()))?;
        if magic != CDG_MAGIC {
            return Err(Error::Parse(format!(
                "wrong magic {:02x?} (expected {:02x?} \"CDG1\")",
                magic, CDG_MAGIC
            )));
        }
        let ndim = read_u32(&mut r, "ndim")?;
        if ndim != 4 {
            return Err(Error::Parse(format!("ndim {} (expected 4)", ndim)));
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            *d = read_u32(&mut r, &format!("dim {}", k))? as usize;
        }
        validate_dims(dims).map_err(|e| Error::Parse(e.to_string()))?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for k in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Parse(format!("truncated data: {} of {} values", k, n)))?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_cdg(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
        let file = std::fs::File::open(path)?;
        Tensor4::read_cdg(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Parse(format!("truncated header: missing {}", what)))?;
    Ok(u32::from_le_bytes(buf))
}

fn validate_dims(dims: [usize; 4]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("dimension zero in {:?}", dims)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn channel_mean_of_two_slices() {
        let f = Tensor4::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let m = f.channel_mean();
        assert_eq!(m.data(), &[2.0, 2.0]);
    }

    #[test]
    fn channel_mean_fixes_constants() {
        let c = Tensor4::from_fn([3, 2, 2, 1], |_, i, h, _| (i + h) as f64).unwrap();
        assert_eq!(c.channel_mean(), c);
    }

    #[test]
    fn channel_mean_centers_residual() {
        // Mean of (f - channel_mean(f)) over axis 0 vanishes.
        let f = random_tensor([8, 3, 2, 2], 7);
        let mut resid = f.clone();
        resid.add_scaled(&f.channel_mean(), -1.0).unwrap();
        let rm = resid.channel_mean();
        for &v in rm.data() {
            assert!(v.abs() <= 1e-12, "residual mean {} not ~0", v);
        }
    }

    #[test]
    fn mean_and_deformation_are_orthogonal() {
        let f = random_tensor([6, 4, 3, 3], 11);
        let mean = f.channel_mean();
        let resid = f.sub(&mean).unwrap();
        let ip = mean.dot(&resid).unwrap();
        let scale = f.dot(&f).unwrap();
        assert!(ip.abs() <= 1e-10 * scale, "ip {} vs scale {}", ip, scale);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor4::zeros([0, 1, 1, 1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn transpose_identity_and_involution() {
        let f = random_tensor([2, 3, 4, 5], 3);
        assert_eq!(f.transpose_axes([0, 1, 2, 3]).unwrap(), f);
        let t = f.transpose_axes([1, 0, 2, 3]).unwrap();
        assert_eq!(t.dims(), [3, 2, 4, 5]);
        assert_eq!(t.transpose_axes([1, 0, 2, 3]).unwrap(), f);
        assert_eq!(t.at(1, 0, 2, 3), f.at(0, 1, 2, 3));
    }

    #[test]
    fn transpose_shape_rule() {
        let f = Tensor4::zeros([2, 3, 1, 1]).unwrap();
        assert_eq!(f.transpose_axes([1, 0, 2, 3]).unwrap().dims(), [3, 2, 1, 1]);
    }

    #[test]
    fn transpose_rejects_non_permutation() {
        let f = Tensor4::zeros([2, 2, 1, 1]).unwrap();
        assert!(f.transpose_axes([0, 0, 2, 3]).is_err());
        assert!(f.transpose_axes([0, 1, 2, 4]).is_err());
    }

    #[test]
    fn rasterize_is_row_major_and_invertible() {
        let f = Tensor4::new([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = f.rasterize();
        assert_eq!(r.dims(), [4, 1, 1, 1]);
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.derasterize([2, 2, 1, 1]).unwrap(), f);
        let single = Tensor4::new([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(single.rasterize().data(), single.data());
        assert!(r.derasterize([3, 1, 1, 1]).is_err());
    }

    #[test]
    fn cdg_round_trip_is_bitwise() {
        let f = random_tensor([3, 2, 5, 4], 9);
        let mut buf = Vec::new();
        f.write_cdg(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"CDG1");
        let g = Tensor4::read_cdg(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn cdg_rejects_bad_magic_and_truncation() {
        let f = random_tensor([2, 1, 1, 1], 1);
        let mut buf = Vec::new();
        f.write_cdg(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor4::read_cdg(bad.as_slice()),
            Err(Error::Parse(m)) if m.contains("magic")
        ));
        let short = &buf[..buf.len() - 4];
        assert!(matches!(
            Tensor4::read_cdg(short),
            Err(Error::Parse(m)) if m.contains("truncated")
        ));
    }
}
