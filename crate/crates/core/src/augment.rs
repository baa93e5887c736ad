//! Random flips, quarter-turn rotations, intensity shifts and zooms.
//!
//! A transform is first drawn as an [`AugmentPlan`] and then applied to every
//! channel and the label mask, so image and masks always see the same geometry.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagsError};
use crate::volume::{MaskVolume, ModelInput, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Independent probability of each of flip, rotation and intensity shift.
    pub p_flip_rot_intensity: f64,
    pub p_zoom: f64,
    /// Axis pairs `(a, b)` eligible for rotation.
    pub rotation_planes: Vec<(usize, usize)>,
    /// Allowed numbers of quarter turns.
    pub quarter_turns: Vec<u8>,
    /// Shift drawn uniformly from `[-intensity_shift, intensity_shift]`.
    pub intensity_shift: f64,
    pub zoom_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_flip_rot_intensity: 0.5,
            p_zoom: 0.3,
            rotation_planes: vec![(0, 1), (0, 2), (1, 2)],
            quarter_turns: vec![1, 2, 3],
            intensity_shift: 0.1,
            zoom_range: (0.9, 1.1),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            p_flip_rot_intensity: 0.0,
            p_zoom: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_flip_rot_intensity", self.p_flip_rot_intensity), ("p_zoom", self.p_zoom)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TagsError::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.rotation_planes.iter().any(|&(a, b)| a > 2 || b > 2 || a == b) {
            return Err(TagsError::InvalidArgument("rotation planes must be distinct axes < 3".into()));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(TagsError::InvalidArgument(format!("bad zoom range ({lo}, {hi})")));
        }
        if self.intensity_shift < 0.0 {
            return Err(TagsError::InvalidArgument("intensity_shift must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentPlan {
    pub flip_axis: Option<usize>,
    pub rotation: Option<((usize, usize), u8)>,
    pub intensity_shift: f64,
    pub zoom: Option<f64>,
}

impl AugmentPlan {
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let p = policy.p_flip_rot_intensity;
        let mut plan = AugmentPlan::default();
        // Every draw is consumed unconditionally so the stream layout does not
        // depend on which branches fire.
        let (u_flip, flip_axis) = (rng.random::<f64>(), rng.random_range(0..3usize));
        let u_rot = rng.random::<f64>();
        let plane_i = rng.random_range(0..policy.rotation_planes.len().max(1));
        let turn_i = rng.random_range(0..policy.quarter_turns.len().max(1));
        let (u_shift, shift) = (rng.random::<f64>(), rng.random::<f64>());
        let (u_zoom, zoom) = (rng.random::<f64>(), rng.random::<f64>());

        if u_flip < p {
            plan.flip_axis = Some(flip_axis);
        }
        if u_rot < p && !policy.rotation_planes.is_empty() && !policy.quarter_turns.is_empty() {
            plan.rotation = Some((policy.rotation_planes[plane_i], policy.quarter_turns[turn_i] % 4));
        }
        if u_shift < p {
            plan.intensity_shift = (2.0 * shift - 1.0) * policy.intensity_shift;
        }
        if u_zoom < policy.p_zoom {
            let (lo, hi) = policy.zoom_range;
            plan.zoom = Some(lo + (hi - lo) * zoom);
        }
        plan
    }

    pub fn is_identity(&self) -> bool {
        self.flip_axis.is_none()
            && self.rotation.is_none_or(|(_, k)| k == 0)
            && self.intensity_shift == 0.0
            && self.zoom.is_none_or(|z| z == 1.0)
    }

    fn geometric<T: Copy + Default + Lerp>(&self, src: ArrayView3<'_, T>, interp: Interp) -> Array3<T> {
        let mut out = src.to_owned();
        if let Some(axis) = self.flip_axis {
            out = flip(&out.view(), axis);
        }
        if let Some((plane, k)) = self.rotation {
            out = rot90(&out.view(), plane, k);
        }
        if let Some(z) = self.zoom {
            if z != 1.0 {
                out = zoom(&out.view(), z, interp);
            }
        }
        out
    }

    pub fn apply_image(&self, v: &Volume) -> Volume {
        let mut data = self.geometric(v.data.view(), Interp::Linear);
        if self.intensity_shift != 0.0 {
            data.mapv_inplace(|x| x + self.intensity_shift);
        }
        Volume {
            data,
            spacing: v.spacing,
            origin: v.origin,
        }
    }

    pub fn apply_mask(&self, m: &MaskVolume) -> MaskVolume {
        m.with_data(self.geometric(m.data.view(), Interp::Nearest))
    }

    pub fn apply(&self, input: &ModelInput, mask: &MaskVolume) -> (ModelInput, MaskVolume) {
        let image = self.apply_image(&input.image());
        let organ = self.apply_mask(&input.organ());
        let [d, h, w] = image.shape();
        let mut channels = Array4::zeros((3, d, h, w));
        channels.index_axis_mut(Axis(0), 0).assign(&image.data);
        channels.index_axis_mut(Axis(0), 1).assign(&image.data);
        channels
            .index_axis_mut(Axis(0), 2)
            .assign(&organ.data.mapv(f64::from));
        let out = ModelInput {
            channels,
            spacing: input.spacing,
            origin: input.origin,
        };
        (out, self.apply_mask(mask))
    }
}

/// Draws a plan from `policy` and applies it to the sample.
pub fn augment<R: Rng + ?Sized>(
    input: &ModelInput,
    mask: &MaskVolume,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (ModelInput, MaskVolume) {
    AugmentPlan::sample(policy, rng).apply(input, mask)
}

#[derive(Debug, Clone, Copy)]
enum Interp {
    Linear,
    Nearest,
}

pub trait Lerp: Copy {
    fn lerp(a: Self, b: Self, t: f64) -> Self;
}

impl Lerp for f64 {
    fn lerp(a: f64, b: f64, t: f64) -> f64 {
        if t == 0.0 {
            a
        } else {
            a + (b - a) * t
        }
    }
}

impl Lerp for u8 {
    fn lerp(a: u8, b: u8, t: f64) -> u8 {
        if t < 0.5 {
            a
        } else {
            b
        }
    }
}

pub fn flip<T: Copy>(src: &ArrayView3<'_, T>, axis: usize) -> Array3<T> {
    let mut v = src.to_owned();
    v.invert_axis(Axis(axis));
    v
}

/// Rotates by `k` quarter turns in the plane of axes `(a, b)`. Planes with
/// unequal extents only admit half turns; odd `k` is promoted to 2 there.
pub fn rot90<T: Copy>(src: &ArrayView3<'_, T>, plane: (usize, usize), k: u8) -> Array3<T> {
    let (a, b) = plane;
    let mut k = k % 4;
    if src.shape()[a] != src.shape()[b] && k % 2 == 1 {
        k = 2;
    }
    let mut out = src.to_owned();
    for _ in 0..k {
        // out'[.., i_a, .., i_b, ..] = out[.., n-1-i_b, .., i_a, ..]
        let mut v = out.view();
        v.swap_axes(a, b);
        let mut v = v.to_owned();
        v.invert_axis(Axis(b));
        out = v;
    }
    out
}

fn zoom<T: Copy + Default + Lerp>(src: &ArrayView3<'_, T>, factor: f64, interp: Interp) -> Array3<T> {
    let shape = [src.shape()[0], src.shape()[1], src.shape()[2]];
    let coord = |i: usize, n: usize| {
        let c = (n as f64 - 1.0) / 2.0;
        c + (i as f64 - c) / factor
    };
    let inside = |p: f64, n: usize| p >= -0.5 && p <= n as f64 - 0.5;
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let p = [coord(z, shape[0]), coord(y, shape[1]), coord(x, shape[2])];
        if (0..3).any(|a| !inside(p[a], shape[a])) {
            return T::default();
        }
        match interp {
            Interp::Nearest => {
                let i = |a: usize| (p[a].round().max(0.0) as usize).min(shape[a] - 1);
                src[[i(0), i(1), i(2)]]
            }
            Interp::Linear => {
                let tap = |a: usize| {
                    let q = p[a].clamp(0.0, (shape[a] - 1) as f64);
                    let i0 = q.floor() as usize;
                    (i0, (i0 + 1).min(shape[a] - 1), q - i0 as f64)
                };
                let (z0, z1, tz) = tap(0);
                let (y0, y1, ty) = tap(1);
                let (x0, x1, tx) = tap(2);
                let c00 = T::lerp(src[[z0, y0, x0]], src[[z0, y0, x1]], tx);
                let c01 = T::lerp(src[[z0, y1, x0]], src[[z0, y1, x1]], tx);
                let c10 = T::lerp(src[[z1, y0, x0]], src[[z1, y0, x1]], tx);
                let c11 = T::lerp(src[[z1, y1, x0]], src[[z1, y1, x1]], tx);
                T::lerp(T::lerp(c00, c01, ty), T::lerp(c10, c11, ty), tz)
            }
        }
    })
}
