//! Planted-connectome synthetic volumes.
//!
//! Each sample carries one intensity per region drawn from a class-specific
//! multivariate normal. Region means are shared by all classes, so the class
//! signal lives entirely in how region intensities co-vary.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use super::codec::write_volume;
use super::manifest::{DatasetIndex, IndexEntry, Split};
use super::volume::VolumeGrid;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dims: [usize; 3],
    /// Region centers in voxel coordinates (voxel `v` has center `v + 0.5`).
    pub centers: Vec<[f64; 3]>,
    pub radius: f64,
    /// Mean region intensity, shared by all classes.
    pub mean: Vec<f64>,
    /// One `R x R` covariance per class.
    pub covariances: Vec<Array2<f64>>,
    pub noise_std: f64,
    /// Samples per class for (train, val, test).
    pub per_class: [usize; 3],
    pub seed: u64,
}

impl SyntheticConfig {
    /// Eight regions at the octant centers. Class 0 regions are equicorrelated
    /// with correlation `coupling`; class 1 regions are independent.
    pub fn coupled_vs_independent(dims: [usize; 3], per_class: [usize; 3], seed: u64) -> Self {
        let sd = 0.15;
        let coupling = 0.9;
        let mut centers = Vec::with_capacity(8);
        for ox in [0.25, 0.75] {
            for oy in [0.25, 0.75] {
                for oz in [0.25, 0.75] {
                    centers.push([dims[0] as f64 * ox, dims[1] as f64 * oy, dims[2] as f64 * oz]);
                }
            }
        }
        let r = centers.len();
        let edge = *dims.iter().min().unwrap() as f64;
        let coupled = Array2::from_shape_fn((r, r), |(i, j)| {
            sd * sd * if i == j { 1.0 } else { coupling }
        });
        let independent = Array2::from_shape_fn((r, r), |(i, j)| if i == j { sd * sd } else { 0.0 });
        Self {
            dims,
            centers,
            radius: 0.15 * edge,
            mean: vec![0.5; r],
            covariances: vec![coupled, independent],
            noise_std: 0.05,
            per_class,
            seed,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.centers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.covariances.len()
    }

    pub fn validate(&self) -> Result<Vec<Array2<f64>>> {
        let r = self.num_regions();
        if r < 2 {
            return Err(Error::Config(format!("need at least 2 regions, got {r}")));
        }
        if self.mean.len() != r {
            return Err(Error::Config(format!("{} means for {r} regions", self.mean.len())));
        }
        if self.covariances.len() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config("noise std must be >= 0 and radius > 0".into()));
        }
        for (i, c) in self.centers.iter().enumerate() {
            for a in 0..3 {
                if !(c[a] >= 0.0 && c[a] <= self.dims[a] as f64) {
                    return Err(Error::Config(format!("region {i} center {c:?} lies outside {:?}", self.dims)));
                }
            }
        }
        self.covariances
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if s.dim() != (r, r) {
                    return Err(Error::Config(format!("class {k} covariance is {:?}, expected {r}x{r}", s.dim())));
                }
                psd_cholesky(s).map_err(|e| Error::Config(format!("class {k} covariance: {e}")))
            })
            .collect()
    }
}

/// Lower-triangular `L` with `L Lᵀ = sigma` for symmetric positive semidefinite input.
pub fn psd_cholesky(sigma: &Array2<f64>) -> std::result::Result<Array2<f64>, String> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err("not square".into());
    }
    let scale = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-10 * scale;
    for i in 0..n {
        for j in 0..i {
            if (sigma[[i, j]] - sigma[[j, i]]).abs() > tol {
                return Err(format!("not symmetric at ({i}, {j})"));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let d = sigma[[j, j]] - (0..j).map(|k| l[[j, k]] * l[[j, k]]).sum::<f64>();
        if d < -tol {
            return Err(format!("not positive semidefinite (pivot {j} = {d:e})"));
        }
        if d <= tol {
            for i in j + 1..n {
                let r = sigma[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
                if r.abs() > tol.sqrt() * scale.sqrt() {
                    return Err(format!("not positive semidefinite (zero pivot {j} with residual {r:e})"));
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let r = sigma[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            l[[i, j]] = r / ljj;
        }
    }
    Ok(l)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub volumes: Vec<VolumeGrid>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Planted per-region intensities of every sample.
    pub intensities: Vec<Vec<f64>>,
    pub index: DatasetIndex,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> (Vec<VolumeGrid>, Vec<usize>) {
        let mut v = Vec::new();
        let mut l = Vec::new();
        for i in 0..self.volumes.len() {
            if self.splits[i] == split {
                v.push(self.volumes[i].clone());
                l.push(self.labels[i]);
            }
        }
        (v, l)
    }

    /// Writes every volume plus `manifest.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, volume) in self.index.entries.iter().zip(&self.volumes) {
            write_volume(volume, &dir.join(&entry.path))?;
        }
        self.index.write_csv(&dir.join("manifest.csv"))
    }
}

/// Per-voxel list of the regions whose ball contains it.
fn region_membership(cfg: &SyntheticConfig) -> Vec<(usize, usize)> {
    let [h, w, d] = cfg.dims;
    let r2 = cfg.radius * cfg.radius;
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let lin = (x * w + y) * d + z;
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                for (r, c) in cfg.centers.iter().enumerate() {
                    let dist2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    if dist2 <= r2 {
                        out.push((lin, r));
                    }
                }
            }
        }
    }
    out
}

/// Draws one sample of class `class`. Sample `index` uses seed `cfg.seed ^ index`.
fn draw_sample(
    cfg: &SyntheticConfig,
    chol: &Array2<f64>,
    membership: &[(usize, usize)],
    index: u64,
) -> (VolumeGrid, Vec<f64>) {
    let mut rng = seed::rng(cfg.seed ^ index);
    let r = cfg.num_regions();
    let z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a: Vec<f64> = (0..r)
        .map(|i| cfg.mean[i] + (0..=i).map(|k| chol[[i, k]] * z[k]).sum::<f64>())
        .collect();
    let n: usize = cfg.dims.iter().product();
    let mut field = vec![0.0f64; n];
    for &(lin, region) in membership {
        field[lin] += a[region];
    }
    let voxels = field
        .into_iter()
        .map(|v| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            (v + cfg.noise_std * noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    (VolumeGrid::new(cfg.dims, 1, voxels).expect("dims validated"), a)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let chols = cfg.validate()?;
    let membership = region_membership(cfg);
    let mut jobs = Vec::new();
    for (s, split) in Split::ALL.iter().enumerate() {
        for class in 0..cfg.num_classes() {
            for _ in 0..cfg.per_class[s] {
                jobs.push((*split, class));
            }
        }
    }
    use rayon::prelude::*;
    let drawn: Vec<(VolumeGrid, Vec<f64>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(_, class))| draw_sample(cfg, &chols[class], &membership, i as u64))
        .collect();
    let mut out = SyntheticDataset {
        volumes: Vec::with_capacity(jobs.len()),
        labels: Vec::with_capacity(jobs.len()),
        splits: Vec::with_capacity(jobs.len()),
        intensities: Vec::with_capacity(jobs.len()),
        index: DatasetIndex::default(),
    };
    for (i, ((split, class), (volume, a))) in jobs.into_iter().zip(drawn).enumerate() {
        out.index.entries.push(IndexEntry {
            id: format!("s{i:05}"),
            path: format!("s{i:05}.vol").into(),
            label: class,
            split,
        });
        out.volumes.push(volume);
        out.labels.push(class);
        out.splits.push(split);
        out.intensities.push(a);
    }
    Ok(out)
}

/// Mean voxel value inside each region's ball; a plug-in estimate of the planted intensities.
pub fn region_means(cfg: &SyntheticConfig, volume: &VolumeGrid) -> Vec<f64> {
    let membership = region_membership(cfg);
    let r = cfg.num_regions();
    let mut sum = vec![0.0; r];
    let mut count = vec![0usize; r];
    for (lin, region) in membership {
        sum[region] += volume.voxels()[lin] as f64;
        count[region] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}
