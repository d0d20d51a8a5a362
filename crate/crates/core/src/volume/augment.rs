//! Random affine transforms and elastic deformations, trilinear with zero fill.
//!
//! Parameters depend only on the seed (and, for elastic fields, the grid
//! extents), so an MRI/PET pair augmented with the same seed moves together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Per-axis rotation drawn from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Per-axis translation drawn from `±max_translation` voxels.
    pub max_translation: f64,
    pub scale_range: (f64, f64),
    pub elastic_spacing: usize,
    pub elastic_sigma: f64,
    /// Augmented copies per training pair.
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 10.0,
            max_translation: 5.0,
            scale_range: (0.95, 1.05),
            elastic_spacing: 8,
            elastic_sigma: 2.0,
            copies: 3,
        }
    }
}

impl AugmentConfig {
    /// Ranges shrunk in proportion to the desk volume extents.
    pub fn desk() -> Self {
        AugmentConfig {
            max_translation: 2.0,
            elastic_spacing: 4,
            elastic_sigma: 0.75,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale range {lo}..{hi}")));
        }
        if self.max_rotation_deg < 0.0 || self.max_translation < 0.0 || self.elastic_sigma < 0.0 {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        if self.elastic_spacing == 0 {
            return Err(Error::Config("elastic control spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Concrete affine parameters: rotations in degrees about x, y, z, translation in voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: [0.0; 3],
        translation: [0.0; 3],
        scale: 1.0,
    };

    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let rotation_deg = [
            sym(cfg.max_rotation_deg),
            sym(cfg.max_rotation_deg),
            sym(cfg.max_rotation_deg),
        ];
        let translation = [
            sym(cfg.max_translation),
            sym(cfg.max_translation),
            sym(cfg.max_translation),
        ];
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        AffineParams {
            rotation_deg,
            translation,
            scale,
        }
    }

    /// Inverse of `scale·Rz·Ry·Rx`, mapping output offsets back to input offsets.
    fn inverse_linear(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = matmul3(&rz, &matmul3(&ry, &rx));
        // rotation inverse is its transpose
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = r[j][i] / self.scale;
            }
        }
        inv
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Trilinear read at a continuous position; neighbours outside the grid read as zero.
pub fn sample_trilinear(v: &Volume, q: [f64; 3]) -> f32 {
    let dims = v.dims();
    let base = q.map(f64::floor);
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let mut acc = 0f64;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let wa = if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            w *= wa;
            let c = base[a] + off[a] as f64;
            if c < 0.0 || c >= dims[a] as f64 {
                inside = false;
            } else {
                idx[a] = c as usize;
            }
        }
        if inside && w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

fn resample(v: &Volume, mut source: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Volume> {
    let [dx, dy, dz] = v.dims();
    let mut out = Vec::with_capacity(dx * dy * dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                out.push(sample_trilinear(v, source([x as f64, y as f64, z as f64])));
            }
        }
    }
    v.with_voxels(out)
}

/// Applies `params` about the volume centre.
pub fn apply_affine(v: &Volume, params: &AffineParams) -> Result<Volume> {
    let dims = v.dims();
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let inv = params.inverse_linear();
    resample(v, |p| {
        let d = [
            p[0] - centre[0] - params.translation[0],
            p[1] - centre[1] - params.translation[1],
            p[2] - centre[2] - params.translation[2],
        ];
        let mut q = centre;
        for i in 0..3 {
            for j in 0..3 {
                q[i] += inv[i][j] * d[j];
            }
        }
        q
    })
}

pub fn random_affine(v: &Volume, seed: u64, cfg: &AugmentConfig) -> Result<Volume> {
    apply_affine(v, &AffineParams::sample(seed, cfg))
}

/// Displacement control values on a regular grid, upsampled trilinearly.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    spacing: usize,
    control_dims: [usize; 3],
    /// Three components per control point, x fastest.
    control: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn sample(dims: [usize; 3], seed: u64, spacing: usize, sigma: f64) -> Result<Self> {
        if spacing == 0 {
            return Err(Error::Config("elastic control spacing must be positive".into()));
        }
        let control_dims = dims.map(|d| (d.saturating_sub(1)).div_ceil(spacing) + 1);
        let n: usize = control_dims.iter().product();
        let control = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)])
                .collect()
        } else {
            vec![[0.0; 3]; n]
        };
        Ok(DisplacementField {
            spacing,
            control_dims,
            control,
        })
    }

    pub fn control_values(&self) -> &[[f64; 3]] {
        &self.control
    }

    fn control_at(&self, i: [usize; 3]) -> [f64; 3] {
        let [cx, cy, _] = self.control_dims;
        self.control[i[0] + cx * (i[1] + cy * i[2])]
    }

    /// Displacement at voxel `p`.
    pub fn at(&self, p: [usize; 3]) -> [f64; 3] {
        let s = self.spacing;
        let mut lo = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            lo[a] = (p[a] / s).min(self.control_dims[a] - 1);
            frac[a] = (p[a] - lo[a] * s) as f64 / s as f64;
        }
        let mut d = [0f64; 3];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = lo;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                idx[a] = (lo[a] + off[a]).min(self.control_dims[a] - 1);
            }
            if w == 0.0 {
                continue;
            }
            let c = self.control_at(idx);
            for a in 0..3 {
                d[a] += w * c[a];
            }
        }
        d
    }
}

pub fn elastic_deform_with(v: &Volume, seed: u64, spacing: usize, sigma: f64) -> Result<Volume> {
    let field = DisplacementField::sample(v.dims(), seed, spacing, sigma)?;
    resample(v, |p| {
        let d = field.at([p[0] as usize, p[1] as usize, p[2] as usize]);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    })
}

pub fn elastic_deform(v: &Volume, seed: u64, cfg: &AugmentConfig) -> Result<Volume> {
    elastic_deform_with(v, seed, cfg.elastic_spacing, cfg.elastic_sigma)
}

/// Affine then elastic, both driven by `seed`.
pub fn augment(v: &Volume, seed: u64, cfg: &AugmentConfig) -> Result<Volume> {
    let a = random_affine(v, seed, cfg)?;
    elastic_deform(&a, seed.wrapping_add(0x9E37_79B9_7F4A_7C15), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn ramp() -> Volume {
        Volume::from_fn([9, 7, 5], Modality::Mri, "s", |x, y, z| 1.0 + x as f32 + 0.5 * y as f32 + 0.25 * z as f32)
    }

    #[test]
    fn identity_affine() {
        let v = ramp();
        let out = apply_affine(&v, &AffineParams::IDENTITY).unwrap();
        for (a, b) in out.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pure_translation_shifts_with_zero_fill() {
        let v = ramp();
        let params = AffineParams {
            translation: [2.0, 0.0, 0.0],
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&v, &params).unwrap();
        let [dx, dy, dz] = v.dims();
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let expected = if x >= 2 { v.get(x - 2, y, z) } else { 0.0 };
                    assert!((out.get(x, y, z) - expected).abs() < 1e-5, "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn sampled_params_within_ranges() {
        let cfg = AugmentConfig::default();
        for seed in 0..200 {
            let p = AffineParams::sample(seed, &cfg);
            assert!(p.rotation_deg.iter().all(|r| r.abs() <= 10.0));
            assert!(p.translation.iter().all(|t| t.abs() <= 5.0));
            assert!((0.95..=1.05).contains(&p.scale));
        }
        assert_eq!(AffineParams::sample(4, &cfg), AffineParams::sample(4, &cfg));
    }

    #[test]
    fn zero_sigma_elastic_is_identity() {
        let v = ramp();
        assert_eq!(elastic_deform_with(&v, 1, 8, 0.0).unwrap(), v);
    }

    #[test]
    fn elastic_displacement_statistics() {
        // E|N(0, σ)| = σ·sqrt(2/π)
        let sigma = 2.0;
        let field = DisplacementField::sample([80, 80, 80], 11, 8, sigma).unwrap();
        let values = field.control_values();
        assert!(values.len() >= 1000);
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        for a in 0..3 {
            let mean = values.iter().map(|c| c[a].abs()).sum::<f64>() / values.len() as f64;
            assert!((mean - expected).abs() < 0.1 * expected, "axis {a}: {mean} vs {expected}");
        }
    }

    #[test]
    fn field_interpolates_control_points() {
        let field = DisplacementField::sample([17, 17, 17], 2, 8, 1.0).unwrap();
        let c = field.control_at([1, 2, 0]);
        assert_eq!(field.at([8, 16, 0]), c);
        let mid = field.at([4, 16, 0]);
        let a = field.control_at([0, 2, 0]);
        for k in 0..3 {
            assert!((mid[k] - 0.5 * (a[k] + c[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_keeps_constant_interior() {
        let v = Volume::filled([24, 24, 24], 3.0, Modality::Pet, "s");
        let out = elastic_deform_with(&v, 5, 8, 0.5).unwrap();
        let field = DisplacementField::sample([24, 24, 24], 5, 8, 0.5).unwrap();
        for z in 4..20 {
            for y in 4..20 {
                for x in 4..20 {
                    let d = field.at([x, y, z]);
                    let q = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    if q.iter().all(|c| *c >= 0.0 && *c <= 23.0) {
                        assert!((out.get(x, y, z) - 3.0).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
