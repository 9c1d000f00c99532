use ndarray::ArrayView2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::features::block_outputs;
use crate::data::VolumeGrid;
use crate::error::{Error, Result};
use crate::model::EncoderModel;

pub const AMPLITUDE_FLOOR: f64 = 1e-8;

/// Relative log amplitude by Chebyshev frequency bin for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpectrum {
    /// Normalized frequency in units of pi, ascending from 0.
    pub freq_over_pi: Vec<f64>,
    /// `ln(amp / amp_dc)` per bin, 0 at the first bin.
    pub log_amp: Vec<f64>,
    /// Highest bin minus DC.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub blocks: Vec<BlockSpectrum>,
}

/// In-place 3D DFT of a row-major `grid` buffer, one axis at a time.
fn fft3(buf: &mut [Complex<f64>], grid: [usize; 3], planner: &mut FftPlanner<f64>) {
    let [nx, ny, nz] = grid;
    let strides = [ny * nz, nz, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = grid[axis];
        let fft = planner.plan_fft_forward(n);
        let stride = strides[axis];
        let others: Vec<usize> = (0..nx * ny * nz).filter(|&i| (i / stride) % n == 0).collect();
        for start in others {
            line.clear();
            line.extend((0..n).map(|k| buf[start + k * stride]));
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                buf[start + k * stride] = *v;
            }
        }
    }
}

/// `min(k, n - k) / (n / 2)`: 0 at DC, 1 at the Nyquist index.
fn axis_freq(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64 * 2.0 / n as f64
}

/// Averaged DFT amplitudes (1/N normalization) of token-by-channel maps laid out on `grid`.
pub fn mean_amplitude(maps: &[ArrayView2<f64>], grid: [usize; 3]) -> Result<Vec<f64>> {
    let n: usize = grid.iter().product();
    if grid.contains(&1) {
        return Err(Error::SpectralResolution(grid));
    }
    let mut planner = FftPlanner::new();
    let mut amp = vec![0.0; n];
    let mut count = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for map in maps {
        if map.nrows() != n {
            return Err(Error::Contract(format!("{} tokens do not fill patch grid {grid:?}", map.nrows())));
        }
        for col in map.columns() {
            for (b, &v) in buf.iter_mut().zip(col.iter()) {
                *b = Complex::new(v, 0.0);
            }
            fft3(&mut buf, grid, &mut planner);
            for (a, c) in amp.iter_mut().zip(&buf) {
                *a += c.norm() / n as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no feature channels to transform".into()));
    }
    amp.iter_mut().for_each(|a| *a /= count as f64);
    Ok(amp)
}

/// Bins a full-grid amplitude spectrum by Chebyshev radius and takes logs relative to DC.
pub fn bin_spectrum(amp: &[f64], grid: [usize; 3]) -> BlockSpectrum {
    let [nx, ny, nz] = grid;
    // Radii are keyed at 1e-9 resolution so equal values from different axes share a bin.
    let mut bins: Vec<(i64, f64, f64, usize)> = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let r = axis_freq(x, nx).max(axis_freq(y, ny)).max(axis_freq(z, nz));
                let key = (r * 1e9).round() as i64;
                let a = amp[(x * ny + y) * nz + z];
                match bins.iter_mut().find(|b| b.0 == key) {
                    Some(b) => {
                        b.2 += a;
                        b.3 += 1;
                    }
                    None => bins.push((key, r, a, 1)),
                }
            }
        }
    }
    bins.sort_by_key(|b| b.0);
    let logs: Vec<f64> = bins
        .iter()
        .map(|b| (b.2 / b.3 as f64).max(AMPLITUDE_FLOOR).ln())
        .collect();
    let dc = logs[0];
    let log_amp: Vec<f64> = logs.iter().map(|l| l - dc).collect();
    BlockSpectrum {
        freq_over_pi: bins.iter().map(|b| b.1).collect(),
        delta: log_amp[log_amp.len() - 1] - log_amp[0],
        log_amp,
    }
}

/// Spectrum of one set of maps, for single-map diagnostics and tests.
pub fn map_spectrum(maps: &[ArrayView2<f64>], grid: [usize; 3]) -> Result<BlockSpectrum> {
    Ok(bin_spectrum(&mean_amplitude(maps, grid)?, grid))
}

/// Fourier profile of every encoder block's output on full token sequences.
pub fn fourier_profile<S: crate::scalar::Scalar, M: EncoderModel<S>>(
    model: &M,
    volumes: &[VolumeGrid],
) -> Result<SpectralProfile> {
    let grid = model.config().grid();
    if grid.contains(&1) {
        return Err(Error::SpectralResolution(grid));
    }
    let outputs = block_outputs(model, volumes)?;
    let blocks = (0..model.config().encoder_depth)
        .map(|l| {
            let maps: Vec<ArrayView2<f64>> = outputs.iter().map(|s| s[l].view()).collect();
            map_spectrum(&maps, grid)
        })
        .collect::<Result<_>>()?;
    Ok(SpectralProfile { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CsCrl, ModelConfig};
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    /// Direct O(N^2) DFT amplitudes, 1/N normalized.
    fn direct_amplitude(values: &[f64], grid: [usize; 3]) -> Vec<f64> {
        let [nx, ny, nz] = grid;
        let n = nx * ny * nz;
        let mut out = vec![0.0; n];
        for kx in 0..nx {
            for ky in 0..ny {
                for kz in 0..nz {
                    let (mut re, mut im) = (0.0, 0.0);
                    for x in 0..nx {
                        for y in 0..ny {
                            for z in 0..nz {
                                let phase = -2.0
                                    * PI
                                    * ((kx * x) as f64 / nx as f64 + (ky * y) as f64 / ny as f64 + (kz * z) as f64 / nz as f64);
                                let v = values[(x * ny + y) * nz + z];
                                re += v * phase.cos();
                                im += v * phase.sin();
                            }
                        }
                    }
                    out[(kx * ny + ky) * nz + kz] = (re * re + im * im).sqrt() / n as f64;
                }
            }
        }
        out
    }

    fn noise(grid: [usize; 3], seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..grid.iter().product::<usize>()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Circular 3-point moving average along every axis.
    fn smooth(v: &[f64], grid: [usize; 3]) -> Vec<f64> {
        let [nx, ny, nz] = grid;
        let mut cur = v.to_vec();
        let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
        for axis in 0..3 {
            let mut next = vec![0.0; cur.len()];
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let mut acc = 0.0;
                        for d in [grid[axis] - 1, 0, 1] {
                            let mut p = [x, y, z];
                            p[axis] = (p[axis] + d) % grid[axis];
                            acc += cur[idx(p[0], p[1], p[2])];
                        }
                        next[idx(x, y, z)] = acc / 3.0;
                    }
                }
            }
            cur = next;
        }
        cur
    }

    fn column(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn fft_matches_direct_dft() {
        for grid in [[2, 2, 2], [3, 4, 5], [5, 5, 5]] {
            let v = noise(grid, 9);
            let m = column(&v);
            let fast = mean_amplitude(&[m.view()], grid).unwrap();
            let slow = direct_amplitude(&v, grid);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{grid:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn spectrum_is_conjugate_symmetric() {
        let grid = [4, 3, 5];
        let amp = mean_amplitude(&[column(&noise(grid, 2)).view()], grid).unwrap();
        let [nx, ny, nz] = grid;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let mirror = (((nx - x) % nx) * ny + (ny - y) % ny) * nz + (nz - z) % nz;
                    assert!((amp[(x * ny + y) * nz + z] - amp[mirror]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_is_flat() {
        let grid = [5, 5, 5];
        let mut v = vec![0.0; 125];
        v[31] = 1.0;
        let s = map_spectrum(&[column(&v).view()], grid).unwrap();
        assert_eq!(s.freq_over_pi.len(), 3);
        assert!(s.log_amp.iter().all(|l| l.abs() < 1e-12));
        assert!(s.delta.abs() < 1e-12);
    }

    #[test]
    fn constant_map_hits_the_floor() {
        let grid = [4, 4, 4];
        let s = map_spectrum(&[column(&[1.0; 64]).view()], grid).unwrap();
        assert_eq!(s.freq_over_pi, vec![0.0, 0.5, 1.0]);
        assert!((s.delta - AMPLITUDE_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_lowers_high_frequency_content() {
        let grid = [6, 6, 6];
        let mut lower = 0;
        for seed in 0..100 {
            let raw = noise(grid, seed);
            let smoothed = smooth(&raw, grid);
            let d_raw = map_spectrum(&[column(&raw).view()], grid).unwrap().delta;
            let d_smooth = map_spectrum(&[column(&smoothed).view()], grid).unwrap().delta;
            // Same deltas from the direct transform.
            let d_raw_direct = bin_spectrum(&direct_amplitude(&raw, grid), grid).delta;
            assert!((d_raw - d_raw_direct).abs() < 1e-9);
            if d_smooth < d_raw {
                lower += 1;
            }
        }
        assert!(lower >= 95, "{lower} of 100");
    }

    #[test]
    fn unit_axis_is_rejected() {
        let m = column(&[1.0; 4]);
        assert!(matches!(mean_amplitude(&[m.view()], [4, 1, 1]), Err(Error::SpectralResolution(_))));
    }

    #[test]
    fn model_profile_has_one_entry_per_block() {
        let model = CsCrl::<f64>::build(&ModelConfig::tiny(), 1).unwrap();
        let v = VolumeGrid::filled([20, 20, 20], 1, 0.3).unwrap();
        let p = fourier_profile(&model, &[v]).unwrap();
        assert_eq!(p.blocks.len(), 2);
        for b in &p.blocks {
            assert_eq!(b.freq_over_pi, vec![0.0, 1.0]);
            assert_eq!(b.log_amp[0], 0.0);
        }
    }
}
