use ndarray::Array2;

use crate::data::grid_coords;
use crate::scalar::Scalar;

/// Width of each per-axis block: the largest even number `<= dim / 3`.
pub fn axis_block(dim: usize) -> usize {
    2 * (dim / 6)
}

/// Fixed sin-cos position table of shape `(N, dim)` over the patch grid.
///
/// `dim` is split into three equal even-sized blocks for the x, y and z grid
/// coordinates; the remaining `dim - 3 * block` columns are zero. Within a
/// block, column pair `(2j, 2j + 1)` holds `sin(p / 10000^(2j / block))` and
/// the matching cosine.
pub fn position_encoding<S: Scalar>(grid: [usize; 3], dim: usize) -> Array2<S> {
    assert!(dim >= 6, "position encoding needs dim >= 6, got {dim}");
    let n: usize = grid.iter().product();
    let block = axis_block(dim);
    let mut table = Array2::<S>::zeros((n, dim));
    for idx in 0..n {
        let coords = grid_coords(idx, grid);
        for (axis, &p) in coords.iter().enumerate() {
            let offset = axis * block;
            for j in 0..block / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / block as f64);
                let angle = p as f64 * freq;
                table[[idx, offset + 2 * j]] = S::c(angle.sin());
                table[[idx, offset + 2 * j + 1]] = S::c(angle.cos());
            }
        }
    }
    table
}
