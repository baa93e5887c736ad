//! Text-alignment objective on per-stage adapter outputs, focal and dice
//! primitives, and the total training loss.

use ndarray::{Array2, Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{self, sigmoid};
use crate::autograd::{Graph, Var, LOG_CLAMP};
use crate::encoder::StageFeatures;
use crate::error::{Result, TagsError};
use crate::prompt_bank::TextEmbeddingPair;
use crate::volume::{MaskVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            eps: 1e-5,
            tau: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(0.0..=1.0).contains(&self.alpha) || !(self.eps > 0.0) || !(self.tau > 0.0) {
            return Err(TagsError::InvalidArgument(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// Cosine similarities of every token with the (fg, bg) text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub grid: Shape3,
    /// `[tokens, 2]`, columns `(fg, bg)`.
    pub values: Array2<f64>,
}

/// Per-voxel two-way probabilities, columns `(fg, bg)`, z-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    pub shape: Shape3,
    pub probs: Array2<f64>,
}

impl DensePrediction {
    pub fn foreground(&self) -> Array3<f64> {
        Array3::from_shape_vec(self.shape, self.probs.column(0).to_vec()).expect("row count matches shape")
    }

    /// Voxels whose foreground probability exceeds 0.5.
    pub fn threshold(&self, spacing: [f64; 3]) -> MaskVolume {
        let fg = self.foreground().mapv(|p| u8::from(p > 0.5));
        MaskVolume::new(fg, spacing).expect("binary")
    }
}

/// Unit-norm text matrix `[c, 2]`.
fn text_matrix(text: &TextEmbeddingPair) -> Array2<f64> {
    let mut m = text.as_matrix();
    for mut col in m.columns_mut() {
        let n = col.dot(&col).sqrt();
        if n > 0.0 {
            col.mapv_inplace(|v| v / n);
        }
    }
    m
}

pub fn similarity_map(a: &StageFeatures, text: &TextEmbeddingPair) -> Result<SimilarityMap> {
    if a.width() != text.width() {
        return Err(TagsError::ShapeMismatch(format!(
            "adapter width {} vs text width {}",
            a.width(),
            text.width()
        )));
    }
    let (unit, _) = kernels::row_normalize(&a.tokens.view());
    Ok(SimilarityMap {
        grid: a.grid,
        values: unit.dot(&text_matrix(text)),
    })
}

/// Trilinear resize of both similarity channels to `target`, then a two-way
/// softmax of `sim / tau`.
pub fn dense_prediction(m: &SimilarityMap, target: Shape3, cfg: &LossConfig) -> Result<DensePrediction> {
    if (0..3).any(|a| target[a] < m.grid[a]) {
        return Err(TagsError::InvalidArgument(format!(
            "target shape {target:?} is smaller than grid {:?}",
            m.grid
        )));
    }
    let up = if target == m.grid {
        m.values.clone()
    } else {
        kernels::upsample_trilinear(&m.values.view(), m.grid, target)
    };
    let k = 1.0 / cfg.tau;
    let mut probs = Array2::zeros((up.nrows(), 2));
    for (i, row) in up.rows().into_iter().enumerate() {
        let p = sigmoid(row[0] * k - row[1] * k);
        probs[[i, 0]] = p;
        probs[[i, 1]] = 1.0 - p;
    }
    Ok(DensePrediction { shape: target, probs })
}

fn flat_target(y: &MaskVolume) -> Array2<f64> {
    let n = y.data.len();
    Array2::from_shape_vec((n, 1), y.data.iter().map(|&v| f64::from(v)).collect()).expect("length")
}

fn check_shape(shape: Shape3, y: &MaskVolume) -> Result<()> {
    if shape != y.shape() {
        return Err(TagsError::ShapeMismatch(format!("prediction {shape:?} vs target {:?}", y.shape())));
    }
    Ok(())
}

/// Mean focal loss of the foreground channel against `y`.
pub fn focal_loss(p: &DensePrediction, y: &MaskVolume, cfg: &LossConfig) -> Result<f64> {
    check_shape(p.shape, y)?;
    let fg = p.probs.column(0).insert_axis(ndarray::Axis(1)).to_owned();
    Ok(kernels::focal_terms(&fg.view(), &flat_target(y).view(), cfg.alpha, cfg.gamma, LOG_CLAMP).0)
}

/// Soft dice loss of foreground probabilities `p` against `y`.
pub fn dice_loss(p: &ArrayView3<'_, f64>, y: &MaskVolume, cfg: &LossConfig) -> Result<f64> {
    check_shape(p.dim().into(), y)?;
    let inter: f64 = Zip::from(p).and(&y.data).fold(0.0, |acc, &a, &b| acc + a * f64::from(b));
    let denom = p.sum() + y.count() as f64 + cfg.eps;
    Ok(1.0 - (2.0 * inter + cfg.eps) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTerm {
    pub focal: f64,
    pub dice: f64,
}

impl StageTerm {
    pub fn total(&self) -> f64 {
        0.5 * self.focal + 0.5 * self.dice
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLoss {
    pub stages: Vec<StageTerm>,
    pub total: f64,
}

/// `l_a = sum_s [ 0.5 focal + 0.5 dice ]` of the per-stage dense predictions.
pub fn alignment_loss(
    adapter_outputs: &[StageFeatures],
    text: &TextEmbeddingPair,
    y: &MaskVolume,
    cfg: &LossConfig,
) -> Result<AlignmentLoss> {
    let mut stages = Vec::with_capacity(adapter_outputs.len());
    for a in adapter_outputs {
        let pred = dense_prediction(&similarity_map(a, text)?, y.shape(), cfg)?;
        let focal = focal_loss(&pred, y, cfg)?;
        let dice = dice_loss(&pred.foreground().view(), y, cfg)?;
        stages.push(StageTerm { focal, dice });
    }
    let total = stages.iter().map(StageTerm::total).sum();
    Ok(AlignmentLoss { stages, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub dice: f64,
    pub alignment: f64,
    pub total: f64,
}

/// `L = dice(y_hat, y) + l_a`.
pub fn total_loss(y_hat: &ArrayView3<'_, f64>, y: &MaskVolume, l_a: f64, cfg: &LossConfig) -> Result<TotalLoss> {
    let dice = dice_loss(y_hat, y, cfg)?;
    Ok(TotalLoss {
        dice,
        alignment: l_a,
        total: dice + l_a,
    })
}

/// Graph handles of the alignment loss.
#[derive(Debug, Clone)]
pub struct AlignmentVars {
    pub total: Var,
    pub focal: Vec<Var>,
    pub dice: Vec<Var>,
}

/// Differentiable [`alignment_loss`] over adapter outputs living in `g`.
pub fn alignment_loss_graph(
    g: &mut Graph<'_>,
    adapter_outputs: &[Var],
    grid: Shape3,
    text: &TextEmbeddingPair,
    y: &MaskVolume,
    cfg: &LossConfig,
) -> Result<AlignmentVars> {
    let target = flat_target(y);
    let t = g.input(text_matrix(text));
    let mut focal = Vec::new();
    let mut dice = Vec::new();
    let mut terms = Vec::new();
    for &a in adapter_outputs {
        if g.value(a).ncols() != text.width() {
            return Err(TagsError::ShapeMismatch("adapter width differs from text width".into()));
        }
        let unit = g.row_normalize(a);
        let sim = g.matmul(unit, t);
        let up = g.resize(sim, grid, y.shape());
        let scaled = g.scale(up, 1.0 / cfg.tau);
        let p = g.softmax2(scaled);
        let f = g.focal_loss(p, target.clone(), cfg.alpha, cfg.gamma);
        let d = g.dice_loss(p, target.clone(), cfg.eps);
        let fd = g.add(f, d);
        terms.push(g.scale(fd, 0.5));
        focal.push(f);
        dice.push(d);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(AlignmentVars { total, focal, dice })
}

/// Differentiable dice term of the decoder output `p` (`[voxels, 1]`).
pub fn dice_loss_graph(g: &mut Graph<'_>, p: Var, y: &MaskVolume, cfg: &LossConfig) -> Var {
    g.dice_loss(p, flat_target(y), cfg.eps)
}
