//! The 3×3×3 overlapping patch grid.

use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Windows per axis.
pub const WINDOWS_PER_AXIS: usize = 3;
pub const PATCH_COUNT: usize = WINDOWS_PER_AXIS * WINDOWS_PER_AXIS * WINDOWS_PER_AXIS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    volume_dims: [usize; 3],
    patch_dims: [usize; 3],
    axis_starts: [[usize; WINDOWS_PER_AXIS]; 3],
}

/// Starts `{0, floor(p/2), dim - p}` along one axis.
fn axis_starts(dim: usize, p: usize) -> Result<[usize; WINDOWS_PER_AXIS]> {
    if p == 0 || p > dim {
        return Err(Error::Config(format!("patch extent {p} does not fit volume extent {dim}")));
    }
    let stride = p / 2;
    if dim - p > stride + p {
        return Err(Error::Config(format!(
            "three windows of {p} with stride {stride} cannot cover extent {dim}"
        )));
    }
    Ok([0, stride.min(dim - p), dim - p])
}

impl PatchGrid {
    pub fn new(volume_dims: [usize; 3], patch_dims: [usize; 3]) -> Result<Self> {
        let mut axis = [[0; WINDOWS_PER_AXIS]; 3];
        for a in 0..3 {
            axis[a] = axis_starts(volume_dims[a], patch_dims[a])?;
        }
        Ok(PatchGrid {
            volume_dims,
            patch_dims,
            axis_starts: axis,
        })
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        self.patch_dims
    }

    pub fn axis_starts(&self, axis: usize) -> [usize; WINDOWS_PER_AXIS] {
        self.axis_starts[axis]
    }

    /// All 27 `(x, y, z)` starts, x-major: index `9i + 3j + k` for x-window `i`,
    /// y-window `j`, z-window `k`.
    pub fn starts(&self) -> Vec<[usize; 3]> {
        let [xs, ys, zs] = self.axis_starts;
        let mut out = Vec::with_capacity(PATCH_COUNT);
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    pub fn start(&self, index: usize) -> [usize; 3] {
        let w = WINDOWS_PER_AXIS;
        [
            self.axis_starts[0][index / (w * w)],
            self.axis_starts[1][(index / w) % w],
            self.axis_starts[2][index % w],
        ]
    }

    pub fn len(&self) -> usize {
        PATCH_COUNT
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of patches containing each voxel, x fastest.
    pub fn coverage(&self) -> Vec<u8> {
        let [dx, dy, dz] = self.volume_dims;
        let mut cov = vec![0u8; dx * dy * dz];
        for s in self.starts() {
            for z in s[2]..s[2] + self.patch_dims[2] {
                for y in s[1]..s[1] + self.patch_dims[1] {
                    let row = dx * (y + dy * z);
                    for c in &mut cov[row + s[0]..row + s[0] + self.patch_dims[0]] {
                        *c += 1;
                    }
                }
            }
        }
        cov
    }

    pub fn extract(&self, v: &Volume, index: usize) -> Result<Tensor<f32>> {
        if v.dims() != self.volume_dims {
            return Err(Error::dim("extract_patch", &v.dims(), &self.volume_dims));
        }
        extract_patch(v, self.start(index), self.patch_dims)
    }

    pub fn extract_all(&self, v: &Volume) -> Result<Vec<Tensor<f32>>> {
        (0..PATCH_COUNT).map(|i| self.extract(v, i)).collect()
    }
}

pub fn make_patch_grid(volume_dims: [usize; 3], patch_dims: [usize; 3]) -> Result<PatchGrid> {
    PatchGrid::new(volume_dims, patch_dims)
}

/// Copies the box at `start` into a `[1, pz, py, px]` tensor.
pub fn extract_patch(v: &Volume, start: [usize; 3], patch_dims: [usize; 3]) -> Result<Tensor<f32>> {
    let dims = v.dims();
    for a in 0..3 {
        if patch_dims[a] == 0 || start[a] + patch_dims[a] > dims[a] {
            return Err(Error::shape(
                "extract_patch",
                format!("box {start:?}+{patch_dims:?} exceeds volume {dims:?}"),
            ));
        }
    }
    let [px, py, pz] = patch_dims;
    let mut data = Vec::with_capacity(px * py * pz);
    for z in start[2]..start[2] + pz {
        for y in start[1]..start[1] + py {
            let row = v.index(start[0], y, z);
            data.extend_from_slice(&v.voxels()[row..row + px]);
        }
    }
    Tensor::new(vec![1, pz, py, px], data)
}
