use ndarray::{Array2, ArrayView1};

use super::volume::VolumeGrid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered flattened patch vectors.
///
/// Row `i` of `data` is the token whose position in the full patch sequence is
/// `indices[i]`. Full sequences have `indices == 0..N`; the visible/masked
/// halves produced by [`split_tokens`] keep the original positions.
///
/// Tokens enumerate the patch grid x-major: `idx = (gx * GY + gy) * GZ + gz`.
/// Inside a token, voxels are flattened as `((dx * P + dy) * P + dz) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<S> {
    pub data: Array2<S>,
    pub indices: Vec<usize>,
    pub grid: [usize; 3],
    pub patch_size: usize,
    pub channels: usize,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn token_len(&self) -> usize {
        self.data.ncols()
    }

    /// Number of tokens in the full sequence this one was drawn from.
    pub fn full_count(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, S> {
        self.data.row(i)
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.full_count() && self.indices.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn cast<T: Scalar>(&self) -> TokenSequence<T> {
        TokenSequence {
            data: self.data.mapv(|v| T::c(v.to_f64_lossy())),
            indices: self.indices.clone(),
            grid: self.grid,
            patch_size: self.patch_size,
            channels: self.channels,
        }
    }
}

/// Patch-grid coordinates of linear token index `idx`.
pub fn grid_coords(idx: usize, grid: [usize; 3]) -> [usize; 3] {
    let gz = idx % grid[2];
    let gy = (idx / grid[2]) % grid[1];
    let gx = idx / (grid[1] * grid[2]);
    [gx, gy, gz]
}

pub fn patch_grid(dims: [usize; 3], p: usize) -> Result<[usize; 3]> {
    if p == 0 || dims.iter().any(|&d| d == 0 || d % p != 0) {
        return Err(Error::Geometry(format!(
            "volume dims {dims:?} are not divisible by patch size {p}"
        )));
    }
    Ok([dims[0] / p, dims[1] / p, dims[2] / p])
}

/// Cuts a volume into non-overlapping `P^3` blocks, one token per block.
pub fn patchify<S: Scalar>(volume: &VolumeGrid, p: usize) -> Result<TokenSequence<S>> {
    let grid = patch_grid(volume.dims(), p)?;
    let c = volume.channels();
    let n = grid.iter().product::<usize>();
    let len = p * p * p * c;
    let mut data = Array2::<S>::zeros((n, len));
    for (idx, mut row) in data.rows_mut().into_iter().enumerate() {
        let [gx, gy, gz] = grid_coords(idx, grid);
        let mut k = 0;
        for dx in 0..p {
            for dy in 0..p {
                for dz in 0..p {
                    let base = volume.index(gx * p + dx, gy * p + dy, gz * p + dz, 0);
                    for ch in 0..c {
                        row[k] = S::c(volume.voxels()[base + ch] as f64);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        data,
        indices: (0..n).collect(),
        grid,
        patch_size: p,
        channels: c,
    })
}

/// Inverse of [`patchify`]. Requires a full, ordered sequence.
pub fn unpatchify<S: Scalar>(tokens: &TokenSequence<S>) -> Result<VolumeGrid> {
    let p = tokens.patch_size;
    let c = tokens.channels;
    let grid = tokens.grid;
    if p == 0 || c == 0 {
        return Err(Error::Geometry("patch size and channels must be positive".into()));
    }
    if tokens.token_len() != p * p * p * c {
        return Err(Error::Geometry(format!(
            "token length {} does not match P^3*C = {}",
            tokens.token_len(),
            p * p * p * c
        )));
    }
    if !tokens.is_full() {
        return Err(Error::Geometry(format!(
            "unpatchify needs the full ordered sequence of {} tokens, got {}",
            tokens.full_count(),
            tokens.count()
        )));
    }
    let dims = [grid[0] * p, grid[1] * p, grid[2] * p];
    let mut volume = VolumeGrid::zeros(dims, c)?;
    for (idx, row) in tokens.data.rows().into_iter().enumerate() {
        let [gx, gy, gz] = grid_coords(idx, grid);
        let mut k = 0;
        for dx in 0..p {
            for dy in 0..p {
                for dz in 0..p {
                    let base = volume.index(gx * p + dx, gy * p + dy, gz * p + dz, 0);
                    for ch in 0..c {
                        volume.voxels_mut()[base + ch] = row[k].to_f64_lossy() as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(volume)
}
