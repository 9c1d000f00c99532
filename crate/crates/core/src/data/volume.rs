use crate::error::{Error, Result};

/// A dense 3D scalar field with `C` channels per voxel.
///
/// Voxel `(x, y, z, c)` lives at linear index `((x * W) + y) * D * C + z * C + c`,
/// which is also the on-disk payload order.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    channels: usize,
    voxels: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], channels: usize, voxels: Vec<f32>) -> Result<Self> {
        let expected = voxel_count(dims, channels)?;
        if voxels.len() != expected {
            return Err(Error::Geometry(format!(
                "volume {dims:?}x{channels} needs {expected} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite voxel at linear index {i}")));
        }
        Ok(Self {
            dims,
            channels,
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Result<Self> {
        let n = voxel_count(dims, channels)?;
        Ok(Self {
            dims,
            channels,
            voxels: vec![0.0; n],
        })
    }

    pub fn filled(dims: [usize; 3], channels: usize, value: f32) -> Result<Self> {
        let mut v = Self::zeros(dims, channels)?;
        v.voxels.fill(value);
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        let [_, w, d] = self.dims;
        ((x * w) + y) * d * self.channels + z * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.voxels[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f32) {
        let i = self.index(x, y, z, c);
        self.voxels[i] = value;
    }

    /// True when every voxel lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.voxels.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

pub(crate) fn voxel_count(dims: [usize; 3], channels: usize) -> Result<usize> {
    dims.iter()
        .chain(std::iter::once(&channels))
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Geometry(format!("voxel count overflows for {dims:?}x{channels}")))
}
