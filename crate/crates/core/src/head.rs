//! Point prompts: training-time sampling, the three inference selection
//! strategies, connected components and sinusoidal point encodings.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, IteratorRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edt::squared_edt;
use crate::error::{Result, TagsError};
use crate::volume::{MaskVolume, Shape3};

/// Number of points drawn per training patch.
pub const TRAIN_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    #[serde(alias = "bg", alias = "background")]
    Bg,
    #[serde(alias = "fg", alias = "foreground")]
    Fg,
}

impl PointLabel {
    pub fn index(self) -> usize {
        match self {
            PointLabel::Bg => 0,
            PointLabel::Fg => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub coord: [usize; 3],
    pub label: PointLabel,
}

impl PointPrompt {
    pub fn fg(coord: [usize; 3]) -> Self {
        PointPrompt { coord, label: PointLabel::Fg }
    }

    pub fn bg(coord: [usize; 3]) -> Self {
        PointPrompt { coord, label: PointLabel::Bg }
    }

    pub fn check_bounds(&self, shape: Shape3) -> Result<()> {
        if (0..3).any(|a| self.coord[a] >= shape[a]) {
            let [z, y, x] = self.coord;
            return Err(TagsError::PointOutOfBounds { z, y, x, extent: shape });
        }
        Ok(())
    }
}

impl fmt::Display for PointLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointLabel::Fg => "fg",
            PointLabel::Bg => "bg",
        })
    }
}

impl fmt::Display for PointPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [z, y, x] = self.coord;
        write!(f, "{z},{y},{x}:{}", self.label)
    }
}

/// Parses `z,y,x:fg` or `z,y,x:bg`; the label defaults to foreground.
impl FromStr for PointPrompt {
    type Err = TagsError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TagsError::InvalidArgument(format!("cannot parse point '{s}', expected z,y,x:fg|bg"));
        let (coords, label) = match s.split_once(':') {
            Some((c, l)) => (c, l.trim()),
            None => (s, "fg"),
        };
        let label = match label {
            "fg" | "foreground" => PointLabel::Fg,
            "bg" | "background" => PointLabel::Bg,
            _ => return Err(bad()),
        };
        let v: Vec<usize> = coords
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let coord: [usize; 3] = v.try_into().map_err(|_| bad())?;
        Ok(PointPrompt { coord, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Edge,
    Central,
}

impl FromStr for StrategyKind {
    type Err = TagsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StrategyKind::Random),
            "edge" => Ok(StrategyKind::Edge),
            "central" => Ok(StrategyKind::Central),
            _ => Err(TagsError::InvalidArgument(format!("unknown strategy '{s}'"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Random => "random",
            StrategyKind::Edge => "edge",
            StrategyKind::Central => "central",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub k: usize,
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind, k: usize) -> Result<Self> {
        let s = SelectionStrategy { kind, k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TagsError::InvalidArgument("strategy needs k >= 1".into()));
        }
        if self.kind == StrategyKind::Central && self.k != 1 {
            return Err(TagsError::InvalidArgument("central strategy selects exactly one point".into()));
        }
        Ok(())
    }

    /// Row set of the point-robustness table.
    pub fn robustness_protocol() -> [SelectionStrategy; 4] {
        [
            SelectionStrategy { kind: StrategyKind::Random, k: 1 },
            SelectionStrategy { kind: StrategyKind::Edge, k: 1 },
            SelectionStrategy { kind: StrategyKind::Edge, k: 3 },
            SelectionStrategy { kind: StrategyKind::Central, k: 1 },
        ]
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind, self.k)
    }
}

fn uniform_background<R: Rng + ?Sized>(tumor: &MaskVolume, rng: &mut R) -> [usize; 3] {
    let shape = tumor.shape();
    loop {
        let p = [rng.random_range(0..shape[0]), rng.random_range(0..shape[1]), rng.random_range(0..shape[2])];
        if !tumor.get(p) {
            return p;
        }
    }
}

/// Training prompts: half foreground (tumor voxels) and half background,
/// or all background when the patch holds no tumor.
pub fn sample_train_points<R: Rng + ?Sized>(tumor: &MaskVolume, n: usize, rng: &mut R) -> Result<Vec<PointPrompt>> {
    let total: usize = tumor.shape().iter().product();
    if tumor.count() == total {
        return Err(TagsError::InvalidArgument("mask has no background voxels to sample".into()));
    }
    let fg_voxels = tumor.voxels();
    let n_fg = if fg_voxels.is_empty() { 0 } else { n - n / 2 };
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n_fg {
        pts.push(PointPrompt::fg(*fg_voxels.choose(rng).expect("non-empty")));
    }
    for _ in n_fg..n {
        pts.push(PointPrompt::bg(uniform_background(tumor, rng)));
    }
    Ok(pts)
}

const NEIGHBORS_6: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn offset(p: [usize; 3], d: [isize; 3], shape: Shape3) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + d[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// Tumor voxels with at least one 6-neighbour outside the mask; voxels on the
/// volume border count as boundary.
pub fn boundary_voxels(mask: &MaskVolume) -> Vec<[usize; 3]> {
    let shape = mask.shape();
    mask.voxels()
        .into_iter()
        .filter(|&p| NEIGHBORS_6.iter().any(|&d| offset(p, d, shape).is_none_or(|q| !mask.get(q))))
        .collect()
}

/// 26-connected component with the most voxels; ties go to the component
/// whose first voxel in z-major order comes first.
pub fn largest_component(mask: &MaskVolume) -> MaskVolume {
    let shape = mask.shape();
    let mut label = Array3::<u32>::zeros(shape);
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in mask.voxels() {
        if label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(q) = offset(p, [dz, dy, dx], shape) {
                            if mask.get(q) && label[q] == 0 {
                                label[q] = next;
                                queue.push_back(q);
                            }
                        }
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let keep = best.map_or(0, |(l, _)| l);
    mask.with_data(label.mapv(|l| u8::from(l != 0 && l == keep)))
}

/// Interior distance of every mask voxel to the nearest non-mask voxel,
/// treating the region outside the volume as background.
pub fn interior_distance(mask: &MaskVolume) -> Array3<f64> {
    let [d, h, w] = mask.shape();
    let mut bg = Array3::from_elem((d + 2, h + 2, w + 2), true);
    for ((z, y, x), &v) in mask.data.indexed_iter() {
        bg[[z + 1, y + 1, x + 1]] = v == 0;
    }
    let dist = squared_edt(&bg, mask.spacing());
    Array3::from_shape_fn((d, h, w), |(z, y, x)| dist[[z + 1, y + 1, x + 1]].sqrt())
}

/// Interior distances this close (relatively) are ties; the first voxel in
/// z-major order wins.
const TIE_RTOL: f64 = 1e-12;

/// Inference prompts for evaluation. Reads the tumor ground truth, so it is
/// only used on the evaluation pathway.
pub fn select_inference_points<R: Rng + ?Sized>(
    tumor: &MaskVolume,
    strategy: SelectionStrategy,
    rng: &mut R,
) -> Result<Vec<PointPrompt>> {
    strategy.validate()?;
    if tumor.is_empty() {
        return Err(TagsError::NoLesion);
    }
    let coords = match strategy.kind {
        StrategyKind::Random => tumor.voxels().into_iter().choose_multiple(rng, strategy.k),
        StrategyKind::Edge => {
            let lesion = largest_component(tumor);
            boundary_voxels(&lesion).into_iter().choose_multiple(rng, strategy.k)
        }
        StrategyKind::Central => {
            let lesion = largest_component(tumor);
            let dist = interior_distance(&lesion);
            let mut best: Option<([usize; 3], f64)> = None;
            for p in lesion.voxels() {
                if best.is_none_or(|(_, d)| dist[p] > d * (1.0 + TIE_RTOL)) {
                    best = Some((p, dist[p]));
                }
            }
            vec![best.expect("non-empty lesion").0]
        }
    };
    let mut coords = coords;
    coords.sort();
    Ok(coords.into_iter().map(PointPrompt::fg).collect())
}

/// Number of frequencies per axis in [`sinusoidal_encoding`].
pub const POS_FREQUENCIES: usize = 4;

pub fn encoding_width(freqs: usize) -> usize {
    6 * freqs
}

/// Normalized coordinate of a voxel centre: `(i + 0.5) / n`.
pub fn normalize_coord(p: [usize; 3], shape: Shape3) -> [f64; 3] {
    [0, 1, 2].map(|a| (p[a] as f64 + 0.5) / shape[a] as f64)
}

/// Per row: for each axis `a` and frequency `k`, `sin(2 pi 2^k u_a)` and
/// `cos(2 pi 2^k u_a)`, laid out axis-major.
pub fn sinusoidal_encoding(coords: &[[f64; 3]], freqs: usize) -> Array2<f64> {
    let mut out = Array2::zeros((coords.len(), encoding_width(freqs)));
    for (i, u) in coords.iter().enumerate() {
        for a in 0..3 {
            for k in 0..freqs {
                let arg = std::f64::consts::TAU * (1u64 << k) as f64 * u[a];
                out[[i, (a * freqs + k) * 2]] = arg.sin();
                out[[i, (a * freqs + k) * 2 + 1]] = arg.cos();
            }
        }
    }
    out
}

/// Points in canonical order with their normalized positional encodings and
/// one-hot labels `[bg, fg]`.
pub fn encode_points(points: &[PointPrompt], shape: Shape3, freqs: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    for p in points {
        p.check_bounds(shape)?;
    }
    let mut sorted = points.to_vec();
    sorted.sort();
    let coords: Vec<_> = sorted.iter().map(|p| normalize_coord(p.coord, shape)).collect();
    let pos = sinusoidal_encoding(&coords, freqs);
    let onehot = Array2::from_shape_fn((sorted.len(), 2), |(i, j)| f64::from(sorted[i].label.index() == j));
    Ok((pos, onehot))
}

/// Sinusoidal encodings of every token centre on a grid, z-major.
pub fn grid_encoding(grid: Shape3, freqs: usize) -> Array2<f64> {
    let coords: Vec<_> = ndarray::indices(grid)
        .into_iter()
        .map(|(z, y, x)| normalize_coord([z, y, x], grid))
        .collect();
    sinusoidal_encoding(&coords, freqs)
}
