//! Multi-layer aggregation mask decoder with point-prompt cross-attention.
//!
//! Every stage output is layer-normalized and projected and the projections are fused at token
//! resolution. Prompt embeddings enter through one cross-attention layer on
//! the fused tokens (with a learned null entry so a lone point still gives a
//! position-dependent weighting), then the map is doubled in resolution until it matches
//! the input, concatenated with the three input channels and reduced to a
//! single logit per voxel.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamGroup, ParamId, Var};
use crate::encoder::{EncoderConfig, ParamSink, INPUT_CHANNELS};
use crate::error::{Result, TagsError};
use crate::head::{encode_points, encoding_width, grid_encoding, PointPrompt};
use crate::volume::{ModelInput, Shape3};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of each stage projection and of the fused token map.
    pub fusion_width: usize,
    /// Width of every upsampling level.
    pub up_width: usize,
    pub head_width: usize,
    /// Sinusoid frequencies per axis for point and token positions.
    pub pos_frequencies: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            fusion_width: 256,
            up_width: 32,
            head_width: 16,
            pos_frequencies: 8,
        }
    }
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        DecoderConfig {
            fusion_width: 16,
            up_width: 8,
            head_width: 8,
            pos_frequencies: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_width == 0 || self.up_width == 0 || self.head_width == 0 || self.pos_frequencies == 0 {
            return Err(TagsError::InvalidArgument("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled truncated normal.
fn fan_in(n: usize) -> Init {
    Init::TruncNormal(1.0 / (n as f64).sqrt())
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn declare(sink: &mut dyn ParamSink, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = sink.declare(format!("{name}.weight"), group, (fan_in, fan_out), self::fan_in(fan_in));
        let b = bias.then(|| sink.declare(format!("{name}.bias"), group, (1, fan_out), Init::Zeros));
        Linear { w, b }
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    grid: Shape3,
    levels: usize,
    stage_norm: Vec<(ParamId, ParamId)>,
    stage_proj: Vec<Linear>,
    fuse: Linear,
    point_pos: Linear,
    label_embed: ParamId,
    query: Linear,
    query_pos: Linear,
    key: Linear,
    value: Linear,
    /// Learned key/value that every token can attend to besides the prompts.
    null_key: ParamId,
    null_value: ParamId,
    out: Linear,
    ups: Vec<Linear>,
    head: Linear,
    logit: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    /// `[voxels, 1]` pre-sigmoid scores.
    pub logits: Var,
    /// `[voxels, 1]` foreground probabilities.
    pub probs: Var,
}

impl Decoder {
    pub fn build(enc: &EncoderConfig, cfg: &DecoderConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        cfg.validate()?;
        let p = enc.patch_size;
        if !p.is_power_of_two() {
            return Err(TagsError::InvalidArgument(format!("patch size {p} must be a power of two")));
        }
        let levels = p.trailing_zeros() as usize;
        let d = cfg.fusion_width;
        let pe = encoding_width(cfg.pos_frequencies);
        let dec = ParamGroup::Decoder;
        let prm = ParamGroup::PromptEncoder;
        let stage_norm = (0..enc.num_stages)
            .map(|s| {
                let pre = format!("decoder.stage_norm{s}");
                (
                    sink.declare(format!("{pre}.gamma"), dec, (1, enc.embed_width), Init::Ones),
                    sink.declare(format!("{pre}.beta"), dec, (1, enc.embed_width), Init::Zeros),
                )
            })
            .collect();
        let stage_proj = (0..enc.num_stages)
            .map(|s| Linear::declare(sink, &format!("decoder.stage_proj{s}"), dec, enc.embed_width, d, true))
            .collect();
        let fuse = Linear::declare(sink, "decoder.fuse", dec, enc.num_stages * d, d, true);
        let point_pos = Linear::declare(sink, "prompt.position", prm, pe, d, false);
        let label_embed = sink.declare("prompt.label_embed".into(), prm, (2, d), fan_in(2));
        let query = Linear::declare(sink, "decoder.cross.query", dec, d, d, false);
        let query_pos = Linear::declare(sink, "decoder.cross.query_pos", dec, pe, d, false);
        let key = Linear::declare(sink, "decoder.cross.key", dec, d, d, false);
        let value = Linear::declare(sink, "decoder.cross.value", dec, d, d, false);
        let null_key = sink.declare("decoder.cross.null_key".into(), dec, (1, d), fan_in(d));
        let null_value = sink.declare("decoder.cross.null_value".into(), dec, (1, d), fan_in(d));
        let out = Linear::declare(sink, "decoder.cross.out", dec, d, d, true);
        let ups = (0..levels)
            .map(|l| {
                let fan_in = if l == 0 { d } else { cfg.up_width };
                Linear::declare(sink, &format!("decoder.up{l}"), dec, fan_in, cfg.up_width, true)
            })
            .collect();
        let top = if levels == 0 { d } else { cfg.up_width };
        let head = Linear::declare(sink, "decoder.head", dec, top + INPUT_CHANNELS, cfg.head_width, true);
        let logit = Linear::declare(sink, "decoder.logit", dec, cfg.head_width, 1, true);
        Ok(Decoder {
            cfg: cfg.clone(),
            grid: enc.grid(),
            levels,
            stage_norm,
            stage_proj,
            fuse,
            point_pos,
            label_embed,
            query,
            query_pos,
            key,
            value,
            null_key,
            null_value,
            out,
            ups,
            head,
            logit,
        })
    }

    /// Prompt embeddings `[points, fusion_width]`; `None` for an empty set.
    pub fn embed_points(&self, g: &mut Graph<'_>, points: &[PointPrompt], shape: Shape3) -> Result<Option<Var>> {
        if points.is_empty() {
            return Ok(None);
        }
        let (pos, onehot) = encode_points(points, shape, self.cfg.pos_frequencies)?;
        let pos = g.input(pos);
        let pos = self.point_pos.apply(g, pos);
        let onehot = g.input(onehot);
        let labels = g.param(self.label_embed);
        let lab = g.matmul(onehot, labels);
        Ok(Some(g.add(pos, lab)))
    }

    pub fn forward(&self, g: &mut Graph<'_>, stage_outputs: &[Var], input: &ModelInput, points: &[PointPrompt]) -> Result<DecoderVars> {
        if stage_outputs.len() != self.stage_proj.len() {
            return Err(TagsError::ShapeMismatch(format!(
                "decoder expects {} stage outputs, got {}",
                self.stage_proj.len(),
                stage_outputs.len()
            )));
        }
        let shape = input.shape();
        let projected: Vec<Var> = stage_outputs
            .iter()
            .zip(self.stage_norm.iter().zip(&self.stage_proj))
            .map(|(&f, (&(gamma, beta), lin))| {
                let n = g.layer_norm(f, gamma, beta);
                lin.apply(g, n)
            })
            .collect();
        let cat = g.concat_cols(&projected);
        let fused = self.fuse.apply(g, cat);
        let mut x = g.gelu(fused);

        if let Some(prompts) = self.embed_points(g, points, shape)? {
            let tok_pos = g.input(grid_encoding(self.grid, self.cfg.pos_frequencies));
            let q = self.query.apply(g, x);
            let qp = self.query_pos.apply(g, tok_pos);
            let q = g.add(q, qp);
            let k = self.key.apply(g, prompts);
            let v = self.value.apply(g, prompts);
            let n_points = points.len();
            let null_k = g.param(self.null_key);
            let null_v = g.param(self.null_value);
            let prompt_scores = g.matmul_bt(q, k);
            let null_scores = g.matmul_bt(q, null_k);
            let scores = g.concat_cols(&[prompt_scores, null_scores]);
            let scores = g.scale(scores, 1.0 / (self.cfg.fusion_width as f64).sqrt());
            let attn = g.softmax_rows(scores);
            let to_points = g.slice_cols(attn, 0, n_points);
            let to_null = g.slice_cols(attn, n_points, 1);
            let from_points = g.matmul(to_points, v);
            let from_null = g.matmul(to_null, null_v);
            let ctx = g.add(from_points, from_null);
            let ctx = self.out.apply(g, ctx);
            x = g.add(x, ctx);
        }

        let mut grid = self.grid;
        for up in &self.ups {
            let next = grid.map(|n| n * 2);
            let r = g.resize(x, grid, next);
            let h = up.apply(g, r);
            x = g.gelu(h);
            grid = next;
        }
        if grid != shape {
            return Err(TagsError::ShapeMismatch(format!("decoder reached {grid:?}, input is {shape:?}")));
        }
        let chans = g.input(channels_last(input));
        let cat = g.concat_cols(&[x, chans]);
        let h = self.head.apply(g, cat);
        let h = g.gelu(h);
        let logits = self.logit.apply(g, h);
        g.ensure_finite(logits, "decoder logits")?;
        let probs = g.sigmoid(logits);
        Ok(DecoderVars { logits, probs })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// `[voxels, 3]` view of the input channels, z-major rows.
pub fn channels_last(input: &ModelInput) -> Array2<f64> {
    let [d, h, w] = input.shape();
    let n = d * h * w;
    let mut out = Array2::zeros((n, INPUT_CHANNELS));
    for c in 0..INPUT_CHANNELS {
        for (i, v) in input.channel(c).iter().enumerate() {
            out[[i, c]] = *v;
        }
    }
    out
}
