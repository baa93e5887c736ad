//! Dice, normalized surface Dice, ICC(2,1), the decoder-free aligned-feature
//! prediction and the point-strategy evaluation report.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::edt::squared_edt;
use crate::encoder::StageFeatures;
use crate::error::{Result, TagsError};
use crate::head::SelectionStrategy;
use crate::model::TagsModel;
use crate::objectives::{dense_prediction, similarity_map, LossConfig};
use crate::pipeline::{infer_with_strategy, PreparedCase};
use crate::prompt_bank::TextEmbeddingPair;
use crate::volume::{MaskVolume, Shape3};

/// Default surface tolerance in millimetres.
pub const NSD_TOLERANCE_MM: f64 = 2.0;

fn same_shape(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TagsError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|P & G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    same_shape(pred, gt)?;
    let inter = Zip::from(&pred.data).and(&gt.data).fold(0usize, |n, &a, &b| n + usize::from(a != 0 && b != 0));
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mask voxels with a 6-neighbour outside the mask (the volume border counts
/// as outside).
pub fn surface(mask: &MaskVolume) -> Array3<bool> {
    let [d, h, w] = mask.shape();
    let m = &mask.data;
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if m[[z, y, x]] == 0 {
            return false;
        }
        let out = |zz: isize, yy: isize, xx: isize| {
            zz < 0
                || yy < 0
                || xx < 0
                || zz >= d as isize
                || yy >= h as isize
                || xx >= w as isize
                || m[[zz as usize, yy as usize, xx as usize]] == 0
        };
        let (z, y, x) = (z as isize, y as isize, x as isize);
        out(z - 1, y, x) || out(z + 1, y, x) || out(z, y - 1, x) || out(z, y + 1, x) || out(z, y, x - 1) || out(z, y, x + 1)
    })
}

/// Normalized surface Dice at `tolerance_mm`, using the ground-truth spacing.
pub fn nsd(pred: &MaskVolume, gt: &MaskVolume, tolerance_mm: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.spacing() != gt.spacing() {
        return Err(TagsError::ShapeMismatch("prediction and ground truth spacing differ".into()));
    }
    if !(tolerance_mm >= 0.0) {
        return Err(TagsError::InvalidArgument(format!("tolerance must be >= 0, got {tolerance_mm}")));
    }
    let sp = surface(pred);
    let sg = surface(gt);
    let np = sp.iter().filter(|&&b| b).count();
    let ng = sg.iter().filter(|&&b| b).count();
    if np + ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tol2 = tolerance_mm * tolerance_mm;
    let spacing = gt.spacing();
    let to_g = squared_edt(&sg, spacing);
    let to_p = squared_edt(&sp, spacing);
    let close = |s: &Array3<bool>, d: &Array3<f64>| Zip::from(s).and(d).fold(0usize, |n, &b, &v| n + usize::from(b && v <= tol2));
    Ok((close(&sp, &to_g) + close(&sg, &to_p)) as f64 / (np + ng) as f64)
}

/// Two-way random-effects, absolute-agreement, single-measure ICC over a
/// `cases x raters` matrix.
pub fn icc(m: &Array2<f64>) -> Result<f64> {
    let (n, k) = m.dim();
    if n < 2 || k < 2 {
        return Err(TagsError::InvalidArgument(format!("icc needs >= 2 cases and >= 2 raters, got {n}x{k}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(TagsError::NonFinite("icc input".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = m.mean().expect("non-empty");
    let row_means = m.mean_axis(ndarray::Axis(1)).expect("non-empty");
    let col_means = m.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let ss_total: f64 = m.iter().map(|v| (v - grand).powi(2)).sum();
    if ss_total == 0.0 {
        return Ok(1.0);
    }
    let ss_rows = kf * row_means.iter().map(|r| (r - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    let ss_err = ss_total - ss_rows - ss_cols;
    let bms = ss_rows / (nf - 1.0);
    let jms = ss_cols / (kf - 1.0);
    let ems = ss_err / ((nf - 1.0) * (kf - 1.0));
    Ok((bms - ems) / (bms + (kf - 1.0) * ems + kf * (jms - ems) / nf))
}

/// Decoder-free prediction from one stage's adapter output: the dense
/// text-similarity map thresholded at foreground probability 0.5.
pub fn aligned_feature_predict(
    a: &StageFeatures,
    text: &TextEmbeddingPair,
    target: Shape3,
    spacing: [f64; 3],
    cfg: &LossConfig,
) -> Result<MaskVolume> {
    Ok(dense_prediction(&similarity_map(a, text)?, target, cfg)?.threshold(spacing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    pub strategy: String,
    pub points: Vec<String>,
    pub dice: Option<f64>,
    pub nsd: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub cases: usize,
    pub dice: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub dice: f64,
    pub nsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tolerance_mm: f64,
    pub records: Vec<CaseResult>,
    pub rows: Vec<StrategyRow>,
    /// Present when at least two cases and two strategies completed.
    pub icc: Option<IccRow>,
}

impl MetricReport {
    pub fn from_records(records: Vec<CaseResult>, strategies: &[String], tolerance_mm: f64) -> Result<Self> {
        let rows: Vec<StrategyRow> = strategies
            .iter()
            .map(|s| {
                let ok: Vec<_> = records.iter().filter(|r| &r.strategy == s && r.dice.is_some()).collect();
                let mean = |f: &dyn Fn(&CaseResult) -> f64| {
                    if ok.is_empty() {
                        f64::NAN
                    } else {
                        ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                    }
                };
                StrategyRow {
                    strategy: s.clone(),
                    cases: ok.len(),
                    dice: mean(&|r| r.dice.unwrap_or(0.0)),
                    nsd: mean(&|r| r.nsd.unwrap_or(0.0)),
                }
            })
            .collect();
        // cases that completed under every strategy
        let mut cases: Vec<&str> = records.iter().map(|r| r.case.as_str()).collect();
        cases.dedup();
        let complete: Vec<&str> = cases
            .into_iter()
            .filter(|c| strategies.iter().all(|s| records.iter().any(|r| r.case == *c && &r.strategy == s && r.dice.is_some())))
            .collect();
        let icc_row = if complete.len() >= 2 && strategies.len() >= 2 {
            let matrix = |f: &dyn Fn(&CaseResult) -> Option<f64>| {
                Array2::from_shape_fn((complete.len(), strategies.len()), |(i, j)| {
                    records
                        .iter()
                        .find(|r| r.case == complete[i] && r.strategy == strategies[j])
                        .and_then(f)
                        .expect("complete case")
                })
            };
            Some(IccRow {
                dice: icc(&matrix(&|r| r.dice))?,
                nsd: icc(&matrix(&|r| r.nsd))?,
            })
        } else {
            None
        };
        Ok(MetricReport {
            tolerance_mm,
            records,
            rows,
            icc: icc_row,
        })
    }

    /// Human-readable table, values in percent.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>6} {:>9} {:>9}", "strategy", "cases", "Dice(%)", "NSD(%)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {:>6} {:>9.2} {:>9.2}", r.strategy, r.cases, 100.0 * r.dice, 100.0 * r.nsd);
        }
        match self.icc {
            Some(i) => {
                let _ = writeln!(s, "{:<12} {:>6} {:>9.2} {:>9.2}", "ICC", "", 100.0 * i.dice, 100.0 * i.nsd);
            }
            None => {
                let _ = writeln!(s, "{:<12} {:>6} {:>9} {:>9}", "ICC", "", "n/a", "n/a");
            }
        }
        for r in self.records.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(s, "# {} {}: {}", r.case, r.strategy, r.error.as_deref().unwrap_or(""));
        }
        s
    }
}

/// Seed of the point-selection generator for one (case, strategy) cell.
pub fn cell_seed(seed: u64, case: usize, strategy: usize) -> u64 {
    seed ^ ((case as u64) << 32) ^ ((strategy as u64) << 16) ^ 0x9e37_79b9
}

/// A case that failed to load still produces per-strategy error records.
pub type EvalCase = std::result::Result<PreparedCase, (String, TagsError)>;

/// Runs every strategy on every case and assembles the report.
pub fn evaluate(
    model: &TagsModel,
    store: &ParamStore,
    cases: &[EvalCase],
    strategies: &[SelectionStrategy],
    seed: u64,
    tolerance_mm: f64,
) -> Result<MetricReport> {
    let names: Vec<String> = strategies.iter().map(ToString::to_string).collect();
    let mut records = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        for (si, strategy) in strategies.iter().enumerate() {
            let (id, outcome) = match case {
                Err((id, e)) => (id.clone(), Err(e.to_string())),
                Ok(c) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, ci, si));
                    let r = infer_with_strategy(model, store, &c.input, &c.tumor, *strategy, &mut rng).and_then(|inf| {
                        Ok((dice(&inf.mask, &c.tumor)?, nsd(&inf.mask, &c.tumor, tolerance_mm)?, inf.points))
                    });
                    (c.id.clone(), r.map_err(|e| e.to_string()))
                }
            };
            records.push(match outcome {
                Ok((d, n, pts)) => CaseResult {
                    case: id,
                    strategy: names[si].clone(),
                    points: pts.iter().map(ToString::to_string).collect(),
                    dice: Some(d),
                    nsd: Some(n),
                    error: None,
                },
                Err(e) => CaseResult {
                    case: id,
                    strategy: names[si].clone(),
                    points: Vec::new(),
                    dice: None,
                    nsd: None,
                    error: Some(e),
                },
            });
        }
    }
    MetricReport::from_records(records, &names, tolerance_mm)
}
