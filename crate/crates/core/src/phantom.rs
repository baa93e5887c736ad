//! Synthetic CT-like phantoms: an ellipsoidal organ over a noisy background
//! with a smaller ellipsoidal tumor strictly inside it.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagsError};
use crate::volume::{MaskVolume, Shape3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    /// Organ centre in voxel coordinates.
    pub organ_center: [f64; 3],
    pub organ_radii: [f64; 3],
    /// Tumor centre relative to the organ centre, in voxels.
    pub tumor_offset: [f64; 3],
    pub tumor_radii: [f64; 3],
    /// Uniform per-axis jitter (voxels) added to the tumor offset.
    pub tumor_jitter: f64,
    pub background_hu: f64,
    pub organ_hu: f64,
    pub tumor_hu: f64,
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            spacing: [1.0; 3],
            organ_center: [32.0, 32.0, 32.0],
            organ_radii: [20.0, 18.0, 22.0],
            tumor_offset: [4.0, -3.0, 5.0],
            tumor_radii: [6.0, 6.0, 6.0],
            tumor_jitter: 0.0,
            background_hu: -20.0,
            organ_hu: 80.0,
            tumor_hu: 190.0,
            noise_std: 15.0,
        }
    }
}

impl PhantomSpec {
    /// Scales the tumor radii so its ellipsoid holds `fraction` of the organ volume.
    pub fn with_tumor_fraction(mut self, fraction: f64) -> Self {
        let s = fraction.max(0.0).cbrt();
        self.tumor_radii = self.organ_radii.map(|r| r * s);
        self
    }

    fn check_fits(&self) -> Result<()> {
        for a in 0..3 {
            let (c, r, n) = (self.organ_center[a], self.organ_radii[a], self.shape[a] as f64);
            if !(r > 0.0) {
                return Err(TagsError::InfeasibleGeometry("organ radii must be positive".into()));
            }
            if c - r < 0.0 || c + r > n - 1.0 {
                return Err(TagsError::InfeasibleGeometry(format!(
                    "organ does not fit along axis {a}: centre {c}, radius {r}, extent {n}"
                )));
            }
        }
        if self.tumor_radii.iter().any(|&r| r < 0.0) {
            return Err(TagsError::InfeasibleGeometry("tumor radii must be >= 0".into()));
        }
        if self.tumor_radii.iter().zip(&self.organ_radii).any(|(t, o)| t >= o) {
            return Err(TagsError::InfeasibleGeometry(
                "tumor radius must be smaller than organ radius on every axis".into(),
            ));
        }
        Ok(())
    }

    /// Sufficient containment test for the tumor ellipsoid at `offset`:
    /// `|offset / R| + max(r / R) <= 1` in the organ's normalized frame.
    fn tumor_contained(&self, offset: [f64; 3]) -> bool {
        if self.tumor_radii.contains(&0.0) {
            return true;
        }
        let off: f64 = (0..3).map(|a| (offset[a] / self.organ_radii[a]).powi(2)).sum();
        let scale = (0..3).map(|a| self.tumor_radii[a] / self.organ_radii[a]).fold(0.0, f64::max);
        off.sqrt() + scale <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub organ: MaskVolume,
    pub tumor: MaskVolume,
}

/// Voxels whose centres fall inside the axis-aligned ellipsoid. Any zero
/// radius yields an empty mask.
pub fn ellipsoid_mask(shape: Shape3, center: [f64; 3], radii: [f64; 3]) -> Array3<u8> {
    if radii.iter().any(|&r| r <= 0.0) {
        return Array3::zeros(shape);
    }
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let p = [z as f64, y as f64, x as f64];
        let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
        u8::from(r2 <= 1.0)
    })
}

pub fn synth_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    spec.check_fits()?;
    let mut offset = spec.tumor_offset;
    if spec.tumor_jitter > 0.0 {
        for o in offset.iter_mut() {
            *o += rng.random_range(-spec.tumor_jitter..=spec.tumor_jitter);
        }
    }
    if !spec.tumor_contained(offset) {
        return Err(TagsError::InfeasibleGeometry(format!(
            "tumor at offset {offset:?} with radii {:?} is not strictly inside the organ",
            spec.tumor_radii
        )));
    }
    let organ = ellipsoid_mask(spec.shape, spec.organ_center, spec.organ_radii);
    let tumor_center = [0, 1, 2].map(|a| spec.organ_center[a] + offset[a]);
    let mut tumor = ellipsoid_mask(spec.shape, tumor_center, spec.tumor_radii);
    // discretization guard: the tumor never leaves the organ
    tumor.zip_mut_with(&organ, |t, &o| *t &= o);

    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| TagsError::InvalidArgument(e.to_string()))?;
    let mut image = Array3::from_elem(spec.shape, spec.background_hu);
    for ((img, &o), &t) in image.iter_mut().zip(organ.iter()).zip(tumor.iter()) {
        if t != 0 {
            *img = spec.tumor_hu;
        } else if o != 0 {
            *img = spec.organ_hu;
        }
        if spec.noise_std > 0.0 {
            *img += noise.sample(rng);
        }
    }
    Ok(Phantom {
        image: Volume::new(image, spec.spacing)?,
        organ: MaskVolume::new(organ, spec.spacing)?,
        tumor: MaskVolume::new(tumor, spec.spacing)?,
    })
}
