//! Dense volumes, binary masks and the 3-channel model input.
//!
//! All arrays are indexed `[z, y, x]`, i.e. `(d, h, w)`, with `x` fastest in
//! memory. Spacing and origin follow the same axis order.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagsError};

pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVolume {
    pub data: Array3<u8>,
    pub spacing: [OrderedSpacing; 3],
    pub origin: [OrderedSpacing; 3],
}

/// Bit-pattern wrapper so masks can derive `Eq`/`Hash`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderedSpacing(u64);

impl OrderedSpacing {
    pub fn new(v: f64) -> Self {
        OrderedSpacing(v.to_bits())
    }
    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

fn wrap3(v: [f64; 3]) -> [OrderedSpacing; 3] {
    v.map(OrderedSpacing::new)
}

fn validate_geometry(shape: &[usize], spacing: &[f64; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(TagsError::InvalidArgument(format!(
            "volume extents must be >= 1, got {shape:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(TagsError::InvalidArgument(format!(
            "spacing components must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

fn shape3(dims: &[usize]) -> Shape3 {
    [dims[0], dims[1], dims[2]]
}

impl Volume {
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        validate_geometry(data.shape(), &spacing)?;
        Ok(Volume {
            data,
            spacing,
            origin,
        })
    }

    pub fn shape(&self) -> Shape3 {
        shape3(self.data.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl MaskVolume {
    /// Builds a mask, rejecting any value other than 0 or 1.
    pub fn new(data: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        validate_geometry(data.shape(), &spacing)?;
        if data.iter().any(|&v| v > 1) {
            return Err(TagsError::InvalidArgument(
                "mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(MaskVolume {
            data,
            spacing: wrap3(spacing),
            origin: wrap3(origin),
        })
    }

    pub fn zeros(shape: Shape3, spacing: [f64; 3]) -> Self {
        MaskVolume {
            data: Array3::zeros(shape),
            spacing: wrap3(spacing),
            origin: wrap3([0.0; 3]),
        }
    }

    /// Binarizes arbitrary data: any non-zero value becomes 1.
    pub fn from_nonzero(data: &Array3<f64>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::with_origin(
            data.mapv(|v| u8::from(v != 0.0)),
            spacing,
            origin,
        )
    }

    pub fn shape(&self) -> Shape3 {
        shape3(self.data.shape())
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing.map(OrderedSpacing::get)
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin.map(OrderedSpacing::get)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[p] != 0
    }

    /// Coordinates of all set voxels in lexicographic `(z, y, x)` order.
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        self.data
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|((z, y, x), _)| [z, y, x])
            .collect()
    }

    pub fn as_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    pub fn with_data(&self, data: Array3<u8>) -> Self {
        MaskVolume {
            data,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

/// Three stacked channels `[image, image, organ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub channels: Array4<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl ModelInput {
    pub fn shape(&self) -> Shape3 {
        shape3(&self.channels.shape()[1..])
    }

    pub fn channel(&self, c: usize) -> ArrayView3<'_, f64> {
        self.channels.index_axis(Axis(0), c)
    }

    pub fn image(&self) -> Volume {
        Volume {
            data: self.channel(0).to_owned(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    pub fn organ(&self) -> MaskVolume {
        MaskVolume {
            data: self.channel(2).mapv(|v| u8::from(v != 0.0)),
            spacing: wrap3(self.spacing),
            origin: wrap3(self.origin),
        }
    }

    /// Checks the channel contract: 3 channels, first two identical, third binary.
    pub fn validate(&self) -> Result<()> {
        if self.channels.shape()[0] != 3 {
            return Err(TagsError::ShapeMismatch(format!(
                "model input needs 3 channels, got {}",
                self.channels.shape()[0]
            )));
        }
        if self.channel(0) != self.channel(1) {
            return Err(TagsError::InvalidArgument(
                "image channels 1 and 2 differ".into(),
            ));
        }
        if self.channel(2).iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TagsError::InvalidArgument(
                "organ channel must be binary".into(),
            ));
        }
        Ok(())
    }
}

/// Replicates the image into channels 1 and 2 and puts the organ mask in channel 3.
pub fn inject_organ_channel(image: &Volume, organ: &MaskVolume) -> Result<ModelInput> {
    if image.shape() != organ.shape() {
        return Err(TagsError::ShapeMismatch(format!(
            "image {:?} vs organ mask {:?}",
            image.shape(),
            organ.shape()
        )));
    }
    let [d, h, w] = image.shape();
    let mut channels = Array4::zeros((3, d, h, w));
    channels.slice_mut(s![0, .., .., ..]).assign(&image.data);
    channels.slice_mut(s![1, .., .., ..]).assign(&image.data);
    channels
        .slice_mut(s![2, .., .., ..])
        .assign(&organ.data.mapv(f64::from));
    Ok(ModelInput {
        channels,
        spacing: image.spacing,
        origin: image.origin,
    })
}

/// Clips to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn clip_normalize(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(TagsError::InvalidArgument(format!(
            "clip range requires lo < hi, got [{lo}, {hi}]"
        )));
    }
    let range = hi - lo;
    let data = v.data.mapv(|x| {
        // NaN maps to lo so the output stays finite.
        let c = if x.is_nan() { lo } else { x.clamp(lo, hi) };
        (c - lo) / range
    });
    Ok(Volume {
        data,
        spacing: v.spacing,
        origin: v.origin,
    })
}

fn resampled_extent(shape: Shape3, from: [f64; 3], to: [f64; 3]) -> Shape3 {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((shape[a] as f64 * from[a] / to[a]).round() as usize).max(1);
    }
    out
}

fn validate_target(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(TagsError::InvalidArgument(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    Ok(())
}

/// Linear interpolation taps along one axis: `(i0, i1, weight_of_i1)`.
fn linear_taps(n_in: usize, n_out: usize, from: f64, to: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = (i as f64 * to / from).clamp(0.0, (n_in - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling of an image onto a new voxel spacing, origin preserved.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    validate_geometry(v.data.shape(), &v.spacing)?;
    validate_target(target_spacing)?;
    let shape = v.shape();
    let out_shape = resampled_extent(shape, v.spacing, target_spacing);
    let taps: Vec<_> = (0..3)
        .map(|a| linear_taps(shape[a], out_shape[a], v.spacing[a], target_spacing[a]))
        .collect();
    let src = &v.data;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let data = Array3::from_shape_fn(out_shape, |(z, y, x)| {
        let (z0, z1, tz) = taps[0][z];
        let (y0, y1, ty) = taps[1][y];
        let (x0, x1, tx) = taps[2][x];
        let c00 = lerp(src[[z0, y0, x0]], src[[z0, y0, x1]], tx);
        let c01 = lerp(src[[z0, y1, x0]], src[[z0, y1, x1]], tx);
        let c10 = lerp(src[[z1, y0, x0]], src[[z1, y0, x1]], tx);
        let c11 = lerp(src[[z1, y1, x0]], src[[z1, y1, x1]], tx);
        lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz)
    });
    Ok(Volume {
        data,
        spacing: target_spacing,
        origin: v.origin,
    })
}

/// Nearest-neighbour resampling of a mask onto a new voxel spacing.
pub fn resample_mask(m: &MaskVolume, target_spacing: [f64; 3]) -> Result<MaskVolume> {
    validate_target(target_spacing)?;
    let spacing = m.spacing();
    let shape = m.shape();
    let out_shape = resampled_extent(shape, spacing, target_spacing);
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..out_shape[a])
                .map(|i| {
                    let pos = (i as f64 * target_spacing[a] / spacing[a]).round() as usize;
                    pos.min(shape[a] - 1)
                })
                .collect()
        })
        .collect();
    let data = Array3::from_shape_fn(out_shape, |(z, y, x)| {
        m.data[[idx[0][z], idx[1][y], idx[2][x]]]
    });
    Ok(MaskVolume {
        data,
        spacing: wrap3(target_spacing),
        origin: m.origin,
    })
}

/// Extracts a `size` block starting at `start` (may be negative or run past
/// the far border); out-of-range voxels are filled with `T::default()`.
pub fn crop_padded<T: Copy + Default>(
    src: &ArrayView3<'_, T>,
    start: [isize; 3],
    size: Shape3,
) -> Array3<T> {
    let dims = src.shape();
    let mut out = Array3::from_elem(size, T::default());
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let s = start[a];
        let from = s.max(0);
        let to = (s + size[a] as isize).min(dims[a] as isize);
        if to <= from {
            return out;
        }
        lo[a] = from as usize;
        hi[a] = to as usize;
    }
    let off = |a: usize, v: usize| (v as isize - start[a]) as usize;
    out.slice_mut(s![
        off(0, lo[0])..off(0, hi[0]),
        off(1, lo[1])..off(1, hi[1]),
        off(2, lo[2])..off(2, hi[2])
    ])
    .assign(&src.slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]));
    out
}

/// Writes `patch` into `dst` at `start`, dropping the parts outside `dst`.
pub fn paste_clipped<T: Copy>(dst: &mut Array3<T>, patch: &ArrayView3<'_, T>, start: [isize; 3]) {
    let dims = dst.shape().to_vec();
    let size = patch.shape();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let from = start[a].max(0);
        let to = (start[a] + size[a] as isize).min(dims[a] as isize);
        if to <= from {
            return;
        }
        lo[a] = from as usize;
        hi[a] = to as usize;
    }
    let off = |a: usize, v: usize| (v as isize - start[a]) as usize;
    dst.slice_mut(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
        .assign(&patch.slice(s![
            off(0, lo[0])..off(0, hi[0]),
            off(1, lo[1])..off(1, hi[1]),
            off(2, lo[2])..off(2, hi[2])
        ]));
}

/// Crops every channel of a model input.
pub fn crop_input(input: &ModelInput, start: [isize; 3], size: Shape3) -> ModelInput {
    let [d, h, w] = size;
    let mut channels = Array4::zeros((3, d, h, w));
    for c in 0..3 {
        channels
            .index_axis_mut(Axis(0), c)
            .assign(&crop_padded(&input.channel(c), start, size));
    }
    ModelInput {
        channels,
        spacing: input.spacing,
        origin: input.origin,
    }
}

pub fn crop_mask(mask: &MaskVolume, start: [isize; 3], size: Shape3) -> MaskVolume {
    mask.with_data(crop_padded(&mask.data.view(), start, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Array3<f64> {
        Array3::from_shape_fn(shape, |(z, y, x)| 0.5 * z as f64 - 2.0 * y as f64 + 3.0 * x as f64)
    }

    #[test]
    fn identity_resample_is_bitwise() {
        let v = Volume::new(ramp([5, 6, 7]).mapv(|x| x.sin()), [1.0, 1.0, 1.0]).unwrap();
        let r = resample(&v, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.data, v.data);
        assert_eq!(r.spacing, [1.0; 3]);
    }

    #[test]
    fn resample_extent_doubles() {
        let v = Volume::new(Array3::zeros((4, 4, 4)), [2.0; 3]).unwrap();
        let r = resample(&v, [1.0; 3]).unwrap();
        assert_eq!(r.shape(), [8, 8, 8]);
    }

    #[test]
    fn ramp_resample_matches_direct_trilinear_evaluation() {
        let v = Volume::new(ramp([6, 6, 6]), [2.0, 1.0, 1.5]).unwrap();
        let target = [1.0, 0.5, 0.75];
        let r = resample(&v, target).unwrap();
        assert_eq!(r.shape(), [12, 12, 12]);
        // On a linear ramp trilinear interpolation is exact, so the oracle is
        // the ramp evaluated at the continuous source coordinate.
        for ((z, y, x), &got) in r.data.indexed_iter() {
            let pz = z as f64 * target[0] / 2.0;
            let py = y as f64 * target[1] / 1.0;
            let px = x as f64 * target[2] / 1.5;
            if pz > 5.0 || py > 5.0 || px > 5.0 {
                continue;
            }
            let want = 0.5 * pz - 2.0 * py + 3.0 * px;
            assert!((got - want).abs() < 1e-6, "({z},{y},{x}) {got} vs {want}");
        }
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        assert!(resample(&v, [0.0, 1.0, 1.0]).is_err());
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3]).is_err());
    }

    #[test]
    fn mask_resample_stays_binary() {
        let m = MaskVolume::new(
            Array3::from_shape_fn((4, 4, 4), |(z, y, x)| u8::from((z + y + x) % 3 == 0)),
            [2.0, 2.0, 2.0],
        )
        .unwrap();
        let r = resample_mask(&m, [1.0, 0.7, 1.3]).unwrap();
        assert!(r.data.iter().all(|&v| v <= 1));
        let back = resample_mask(&m, [2.0; 3]).unwrap();
        assert_eq!(back.data, m.data);
    }

    #[test]
    fn clip_normalize_endpoints_and_midpoint() {
        let v = Volume::new(
            Array3::from_shape_vec((1, 1, 4), vec![-52.0, 247.0, -1000.0, 1000.0]).unwrap(),
            [1.0; 3],
        )
        .unwrap();
        let n = clip_normalize(&v, -52.0, 247.0).unwrap();
        assert_eq!(n.data.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);

        let mid = Volume::new(Array3::from_elem((2, 2, 2), 97.5), [1.0; 3]).unwrap();
        let n = clip_normalize(&mid, -52.0, 247.0).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.5));
        assert!(clip_normalize(&mid, 1.0, 1.0).is_err());
    }

    #[test]
    fn organ_channel_injection() {
        let img = Volume::new(ramp([3, 4, 5]), [1.0; 3]).unwrap();
        let empty = MaskVolume::zeros([3, 4, 5], [1.0; 3]);
        let inp = inject_organ_channel(&img, &empty).unwrap();
        assert!(inp.channel(2).iter().all(|&v| v == 0.0));
        assert_eq!(inp.channel(0), img.data.view());
        assert_eq!(inp.channel(1), img.data.view());
        inp.validate().unwrap();

        let full = MaskVolume::new(Array3::ones((3, 4, 5)), [1.0; 3]).unwrap();
        let inp = inject_organ_channel(&img, &full).unwrap();
        assert!(inp.channel(2).iter().all(|&v| v == 1.0));

        let organ = MaskVolume::new(
            Array3::from_shape_fn((3, 4, 5), |(z, y, x)| u8::from(z * y > x)),
            [1.0; 3],
        )
        .unwrap();
        let inp = inject_organ_channel(&img, &organ).unwrap();
        assert_eq!(inp.organ().data, organ.data);

        let wrong = MaskVolume::zeros([3, 4, 6], [1.0; 3]);
        assert!(matches!(
            inject_organ_channel(&img, &wrong),
            Err(TagsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let src = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z * 100 + y * 10 + x) as i32);
        let patch = crop_padded(&src.view(), [-2, 3, 4], [4, 4, 4]);
        assert_eq!(patch[[0, 0, 0]], 0);
        assert_eq!(patch[[2, 0, 0]], 34);
        assert_eq!(patch[[3, 2, 2]], 156);
        assert_eq!(patch[[3, 3, 3]], 0);
        let mut dst = Array3::zeros((5, 6, 7));
        paste_clipped(&mut dst, &patch.view(), [-2, 3, 4]);
        assert_eq!(dst[[1, 4, 5]], src[[1, 4, 5]]);
        assert_eq!(dst[[2, 4, 5]], 0);
    }

    #[test]
    fn masks_reject_non_binary_values() {
        assert!(MaskVolume::new(Array3::from_elem((1, 1, 1), 2), [1.0; 3]).is_err());
    }
}
