use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TagsError};
use crate::volume::{crop_input, crop_mask, MaskVolume, ModelInput, Shape3};

/// Training patch geometry and the foreground:background centre ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: Shape3,
    pub fg_ratio: u32,
    pub bg_ratio: u32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: [128, 128, 128],
            fg_ratio: 2,
            bg_ratio: 1,
        }
    }
}

impl PatchSpec {
    pub fn cube(n: usize) -> Self {
        PatchSpec {
            size: [n, n, n],
            ..Default::default()
        }
    }

    pub fn fg_probability(&self) -> f64 {
        self.fg_ratio as f64 / (self.fg_ratio + self.bg_ratio) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(TagsError::InvalidArgument("patch size must be positive".into()));
        }
        if self.fg_ratio == 0 && self.bg_ratio == 0 {
            return Err(TagsError::InvalidArgument("fg:bg ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PatchSample {
    pub input: ModelInput,
    pub tumor: MaskVolume,
    /// Patch origin in the source volume (may be negative when padded).
    pub start: [isize; 3],
    /// Whether the centre was drawn from the tumor.
    pub foreground: bool,
}

/// Start index of a `size` patch centred on `center`.
pub fn centered_start(center: [usize; 3], size: Shape3) -> [isize; 3] {
    let mut s = [0isize; 3];
    for a in 0..3 {
        s[a] = center[a] as isize - (size[a] / 2) as isize;
    }
    s
}

/// Draws one training patch. With probability `fg/(fg+bg)` the centre is a
/// tumor voxel, otherwise a non-tumor voxel; borders are zero-padded.
pub fn sample_patch<R: Rng + ?Sized>(
    input: &ModelInput,
    tumor: &MaskVolume,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<PatchSample> {
    spec.validate()?;
    if input.shape() != tumor.shape() {
        return Err(TagsError::ShapeMismatch(format!(
            "input {:?} vs tumor {:?}",
            input.shape(),
            tumor.shape()
        )));
    }
    let want_fg = rng.random::<f64>() < spec.fg_probability();
    let fg_voxels = tumor.voxels();
    let foreground = want_fg && !fg_voxels.is_empty();
    let center = if foreground {
        *fg_voxels.choose(rng).expect("non-empty")
    } else {
        let [d, h, w] = tumor.shape();
        let n_bg = d * h * w - fg_voxels.len();
        if n_bg == 0 {
            // whole volume is tumor: any voxel works as a centre
            [rng.random_range(0..d), rng.random_range(0..h), rng.random_range(0..w)]
        } else {
            // rejection sampling stays cheap because tumors are small
            loop {
                let c = [rng.random_range(0..d), rng.random_range(0..h), rng.random_range(0..w)];
                if !tumor.get(c) {
                    break c;
                }
            }
        }
    };
    let start = centered_start(center, spec.size);
    Ok(PatchSample {
        input: crop_input(input, start, spec.size),
        tumor: crop_mask(tumor, start, spec.size),
        start,
        foreground,
    })
}
