//! Pinhole-camera back-projection and reprojection, voxel-grid
//! downsampling, and pixel-point correspondence sampling.
//!
//! Camera frame: +X right, +Y down, +Z forward. Depth is z-depth (distance
//! along the optical axis), with 0 marking invalid pixels. Pixel coordinates
//! use integer indices directly (no half-pixel offset).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<F> {
    pub fx: F,
    pub fy: F,
    pub cx: F,
    pub cy: F,
    pub width: usize,
    pub height: usize,
}

impl<F: Real> CameraIntrinsics<F> {
    pub fn new(fx: F, fy: F, cx: F, cy: F, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= F::zero() || self.fy <= F::zero() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.cx < F::zero()
            || self.cx >= F::of(self.width as f64)
            || self.cy < F::zero()
            || self.cy >= F::of(self.height as f64)
        {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Per-point coordinates and features with provenance back to source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<F> {
    /// `N x 3` coordinates in meters, camera frame.
    pub coords: DenseArray<F>,
    /// `N x C` per-point feature rows.
    pub feats: DenseArray<F>,
    /// Row-major source pixel (`v * width + u`) per point, or -1 if unknown.
    pub pixel_index: Vec<i64>,
}

impl<F: Real> PointCloud<F> {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.ndim() != 2 || self.coords.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "point coords must be Nx3, got {:?}",
                self.coords.shape()
            )));
        }
        if self.feats.rows() != self.coords.rows() {
            return Err(Error::Shape(format!(
                "coords have {} rows but feats have {}",
                self.coords.rows(),
                self.feats.rows()
            )));
        }
        if self.pixel_index.len() != self.coords.rows() {
            return Err(Error::Shape(format!(
                "coords have {} rows but pixel_index has {}",
                self.coords.rows(),
                self.pixel_index.len()
            )));
        }
        Ok(())
    }

    /// Copies the selected point rows into a new cloud (provenance kept).
    pub fn gather(&self, idx: &[usize]) -> Result<PointCloud<F>> {
        Ok(PointCloud {
            coords: crate::ops::gather_rows(&self.coords, idx)?,
            feats: crate::ops::gather_rows(&self.feats, idx)?,
            pixel_index: idx.iter().map(|&i| self.pixel_index[i]).collect(),
        })
    }
}

/// Sampled positive pixel-point pairs within one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// Row-major pixel indices into the source frame.
    pub pixel_rows: Vec<usize>,
    /// Point row indices into the sampled cloud.
    pub point_rows: Vec<usize>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pixel_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_rows.is_empty()
    }
}

/// Lifts every valid pixel of an RGB-D pair into a 3D point with its RGB
/// triple as the feature row. Output follows row-major scan order.
pub fn back_project<F: Real>(
    color: &DenseArray<F>,
    depth: &DenseArray<F>,
    intr: &CameraIntrinsics<F>,
) -> Result<PointCloud<F>> {
    intr.validate()?;
    if color.ndim() != 3 || color.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "color must be HxWx3, got {:?}",
            color.shape()
        )));
    }
    let (h, w) = (color.shape()[0], color.shape()[1]);
    if depth.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "depth shape {:?} does not match color {}x{}",
            depth.shape(),
            h,
            w
        )));
    }
    if h != intr.height || w != intr.width {
        return Err(Error::Shape(format!(
            "intrinsics are {}x{} but arrays are {}x{}",
            intr.width, intr.height, w, h
        )));
    }
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut pixel_index = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = depth.get2(v, u);
            if d < F::zero() {
                return Err(Error::InvalidArgument(format!(
                    "negative depth {d} at pixel ({u}, {v})"
                )));
            }
            if d == F::zero() {
                continue;
            }
            let x = (F::of(u as f64) - intr.cx) * d / intr.fx;
            let y = (F::of(v as f64) - intr.cy) * d / intr.fy;
            coords.extend_from_slice(&[x, y, d]);
            feats.extend_from_slice(&[
                color.get3(v, u, 0),
                color.get3(v, u, 1),
                color.get3(v, u, 2),
            ]);
            pixel_index.push((v * w + u) as i64);
        }
    }
    let n = pixel_index.len();
    Ok(PointCloud {
        coords: DenseArray::from_vec(&[n, 3], coords)?,
        feats: DenseArray::from_vec(&[n, 3], feats)?,
        pixel_index,
    })
}

/// Projects camera-frame points onto the image plane.
///
/// Returns continuous pixel coordinates (`N x 2`, order `u, v`) and a
/// validity flag per point; a point is invalid when its depth is at or
/// below 1e-9 or it lands outside the image.
pub fn project<F: Real>(
    coords: &DenseArray<F>,
    intr: &CameraIntrinsics<F>,
) -> Result<(DenseArray<F>, Vec<bool>)> {
    intr.validate()?;
    if coords.ndim() != 2 || coords.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "coords must be Nx3, got {:?}",
            coords.shape()
        )));
    }
    let n = coords.rows();
    let mut out = DenseArray::zeros(&[n, 2]);
    let mut valid = vec![false; n];
    let eps = F::of(1e-9);
    let (w, h) = (F::of(intr.width as f64), F::of(intr.height as f64));
    for i in 0..n {
        let row = coords.row(i);
        let (x, y, z) = (row[0], row[1], row[2]);
        if z <= eps {
            continue;
        }
        let u = intr.fx * x / z + intr.cx;
        let v = intr.fy * y / z + intr.cy;
        out.set2(i, 0, u);
        out.set2(i, 1, v);
        valid[i] = u >= F::zero() && u < w && v >= F::zero() && v < h;
    }
    Ok((out, valid))
}

/// Integer grid cell of a coordinate for a given voxel edge length.
pub fn voxel_key<F: Real>(x: F, y: F, z: F, voxel_size: F) -> [i64; 3] {
    let cell = |v: F| (v / voxel_size).floor().to_i64().expect("voxel key in i64 range");
    [cell(x), cell(y), cell(z)]
}

/// Groups points into voxel cells sorted by key; member indices keep scan
/// order within each group.
pub fn voxel_groups<F: Real>(
    coords: &DenseArray<F>,
    voxel_size: F,
) -> BTreeMap<[i64; 3], Vec<usize>> {
    let mut groups: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..coords.rows() {
        let row = coords.row(i);
        let key = voxel_key(row[0], row[1], row[2], voxel_size);
        groups.entry(key).or_default().push(i);
    }
    groups
}

/// Collapses each occupied voxel to its centroid with mean features.
///
/// The surviving `pixel_index` is that of the group member nearest the
/// centroid (ties broken toward the lowest pixel index). Output is sorted
/// by voxel key.
pub fn voxel_downsample<F: Real>(cloud: &PointCloud<F>, voxel_size: F) -> Result<PointCloud<F>> {
    if voxel_size <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    cloud.validate()?;
    let c = cloud.feats.row_len();
    let groups = voxel_groups(&cloud.coords, voxel_size);
    let m = groups.len();
    let mut coords = DenseArray::zeros(&[m, 3]);
    let mut feats = DenseArray::zeros(&[m, c]);
    let mut pixel_index = Vec::with_capacity(m);
    for (out_row, members) in groups.values().enumerate() {
        let count = F::of(members.len() as f64);
        let mut centroid = [F::zero(); 3];
        for &i in members {
            let row = cloud.coords.row(i);
            for k in 0..3 {
                centroid[k] = centroid[k] + row[k];
            }
            for (acc, &v) in feats.row_mut(out_row).iter_mut().zip(cloud.feats.row(i)) {
                *acc = *acc + v;
            }
        }
        for k in 0..3 {
            centroid[k] = centroid[k] / count;
        }
        coords.row_mut(out_row).copy_from_slice(&centroid);
        for v in feats.row_mut(out_row) {
            *v = *v / count;
        }

        let mut best = members[0];
        let mut best_dist = F::infinity();
        for &i in members {
            let row = cloud.coords.row(i);
            let mut d = F::zero();
            for k in 0..3 {
                let delta = row[k] - centroid[k];
                d = d + delta * delta;
            }
            let better = d < best_dist
                || (d == best_dist && cloud.pixel_index[i] < cloud.pixel_index[best]);
            if better {
                best = i;
                best_dist = d;
            }
        }
        pixel_index.push(cloud.pixel_index[best]);
    }
    Ok(PointCloud {
        coords,
        feats,
        pixel_index,
    })
}

/// Uniformly samples `count` positive pixel-point pairs without replacement
/// from the points with known provenance.
pub fn sample_correspondences<F: Real>(
    cloud: &PointCloud<F>,
    count: usize,
    rng: &mut Rng,
) -> Result<CorrespondenceSet> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "correspondence count must be positive".into(),
        ));
    }
    cloud.validate()?;
    let valid: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.pixel_index[i] >= 0)
        .collect();
    if valid.len() < count {
        return Err(Error::InvalidArgument(format!(
            "requested {count} correspondences but only {} points have known pixels",
            valid.len()
        )));
    }
    let picks = rng.sample_without_replacement(valid.len(), count);
    let point_rows: Vec<usize> = picks.iter().map(|&k| valid[k]).collect();
    let pixel_rows: Vec<usize> = point_rows
        .iter()
        .map(|&i| cloud.pixel_index[i] as usize)
        .collect();
    Ok(CorrespondenceSet {
        pixel_rows,
        point_rows,
    })
}
