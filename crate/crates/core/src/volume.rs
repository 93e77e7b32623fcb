//! Dense 3D grids stored in C order, depth-major: index = (z * height + y) * width + x.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Intensity volume (normalized intensities after windowing).
pub type CtVolume = Grid3<f32>;
/// Binary voxel mask; any nonzero value is foreground.
pub type Mask3 = Grid3<u8>;

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == dims[0] * dims[1] * dims[2],
            Contract,
            "grid data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// One axial slice as a contiguous `height * width` slice.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy out the voxels inside an inclusive box.
    pub fn crop(&self, b: &Box3) -> Result<Self> {
        ensure!(
            b.fits(self.dims),
            Contract,
            "box {:?} exceeds grid dims {:?}",
            b,
            self.dims
        );
        let out_dims = b.extent();
        let mut data = Vec::with_capacity(out_dims.iter().product());
        for z in b.lo[0]..=b.hi[0] {
            for y in b.lo[1]..=b.hi[1] {
                let row = self.index(z, y, 0);
                data.extend_from_slice(&self.data[row + b.lo[2]..=row + b.hi[2]]);
            }
        }
        Ok(Self {
            dims: out_dims,
            data,
        })
    }

    pub(crate) fn check_same_dims<U>(&self, other: &Grid3<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

impl Grid3<u8> {
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Positive voxel count per axial slice.
    pub fn slice_counts(&self) -> Vec<usize> {
        (0..self.depth())
            .map(|z| self.slice(z).iter().filter(|&&v| v != 0).count())
            .collect()
    }

    /// Tight inclusive bounding box of the positive voxels, if any.
    pub fn bounding_box(&self) -> Option<Box3> {
        let [d, h, w] = self.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..d {
            for y in 0..h {
                let row = self.index(z, y, 0);
                for x in 0..w {
                    if self.data[row + x] != 0 {
                        any = true;
                        for (a, c) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c);
                        }
                    }
                }
            }
        }
        any.then_some(Box3 { lo, hi })
    }

    /// Voxelwise union of several masks of identical shape.
    pub fn union<'a>(masks: impl IntoIterator<Item = &'a Mask3>) -> Result<Mask3> {
        let mut it = masks.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Contract("union of zero masks".into()))?;
        let mut out = first.map(|v| u8::from(v != 0));
        for m in it {
            out.check_same_dims(m)?;
            for (o, &v) in out.data.iter_mut().zip(&m.data) {
                *o |= u8::from(v != 0);
            }
        }
        Ok(out)
    }
}

/// Inclusive voxel box: `lo[a]..=hi[a]` on each axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Box3 {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }

    /// Grow by `margin` voxels per side, clipped to `dims`.
    pub fn expand(&self, margin: usize, dims: [usize; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].saturating_sub(margin);
            out.hi[a] = (self.hi[a] + margin).min(dims[a] - 1);
        }
        out
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }
}

/// Round half away from zero, as an index.
#[inline]
pub(crate) fn round_index(v: f64) -> usize {
    v.round() as usize
}
